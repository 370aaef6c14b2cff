import dataclasses
import hashlib
import os
import shutil
import typing
from pathlib import Path

import numpy as np
import yaml

from iguane.builtins import built_in_tools
from iguane.errors import ConfigError

info = print
package_name = "iguane"


class ConfigManager:
    """
    A class for managing configuration settings for the package.

    Attributes
    ----------
    config : dict
        A dictionary containing the current configuration settings.
    folder_path : Path
        A Path object representing the folder where the configuration files are stored
        (``$IGUANE_HOME``, by default ``~/.iguane``).
    config_file : Path
        A Path object representing the configuration file.
    tools_dict : dict
        A dictionary containing the available external-tool configurations.
    logs : list
        A list of log files every console message is mirrored to.

    Methods
    -------
    check_config_file(load=False)
        Checks if the configuration file exists and loads it if it does.
    save()
        Saves the current configuration settings to the configuration file.
    get(key)
        Returns the value of the specified configuration setting.
    """

    def __init__(self):
        self.config = {"verbose": True, "device": "auto"}
        self.logs = []

        self.folder_path = Path(
            os.environ.get("IGUANE_HOME", Path.home() / f".{package_name}")
        )
        try:
            self.folder_path.mkdir(parents=True, exist_ok=True)
        except OSError:
            # read-only home: run with built-ins only
            self.folder_path = None

        if self.folder_path is not None:
            self.config_file = self.folder_path / "config"
            self.create_builtins_tools_files()
            self.check_config_file(load=True)
        else:
            self.config_file = None

        self.tools_dict = self.build_tools_dict()

    @property
    def verbose(self):
        return self.config.get("verbose", True)

    def check_config_file(self, load=False):
        if self.config_file.exists():
            with self.config_file.open(mode="r") as file:
                if load:
                    loaded = yaml.safe_load(file.read())
                    if isinstance(loaded, dict):
                        self.config.update(loaded)
        else:
            with self.config_file.open(mode="w") as file:
                yaml.dump(self.config, file, default_flow_style=False)

    def save(self):
        if self.config_file is None:
            return
        self.check_config_file()
        with self.config_file.open(mode="w") as file:
            yaml.dump(self.config, file, default_flow_style=False)

    def get(self, key):
        return self.config.get(key)

    def set(self, key, value):
        self.config[key] = value
        self.save()

    def build_tools_dict(self):
        tools_dict = {name.lower(): tools for name, tools in built_in_tools.items()}

        if self.folder_path is not None:
            for tools_file in sorted(self.folder_path.glob("*.tools")):
                with tools_file.open(mode="r") as f:
                    tools = yaml.safe_load(f)
                tools_dict[tools["name"].lower()] = tools
                for name in tools.get("names", ()):
                    tools_dict[name.lower()] = tools

        for tools in built_in_tools.values():
            for name in tools.get("names", ()):
                tools_dict.setdefault(name.lower(), tools)

        return tools_dict

    def create_builtins_tools_files(self, force=False):
        for name, tools in built_in_tools.items():
            tools_file_name = self.folder_path / f"{name}.tools"
            if not tools_file_name.exists() or force:
                self.save_tools_file(dict(tools, names=list(tools["names"])))

    def save_tools_file(self, file):
        if isinstance(file, (str, Path)):
            name = Path(file).stem.lower()
            shutil.copyfile(file, self.folder_path / f"{name}.tools")
        elif isinstance(file, dict):
            name = file["name"].lower()
            with (self.folder_path / f"{name}.tools").open(mode="w") as f:
                yaml.safe_dump(file, f, sort_keys=False)
        else:
            raise TypeError("tools file must be a path or a dict")
        self.tools_dict = self.build_tools_dict()

    def match_tools_name(self, name):
        return self.tools_dict.get(name.lower(), None)


# Declarative configs
# -------------------


def config_hash(config) -> str:
    """SHA-256 of the canonical YAML dump of a config (dataclass or dict)"""
    if dataclasses.is_dataclass(config):
        config = dataclasses.asdict(config)
    canonical = yaml.safe_dump(plain(config), sort_keys=True)
    return hashlib.sha256(canonical.encode()).hexdigest()


def plain(value):
    """Convert a config value to YAML-safe builtins (lists, dicts, scalars)"""
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, dict):
        return {str(k): plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [plain(v) for v in value]
    if hasattr(value, "item") and not isinstance(value, (str, bytes)):
        return value.item()
    if hasattr(value, "value") and type(value).__module__ != "builtins":
        return value.value
    return value


def _line(node, source):
    if node is None:
        return f"{source}"
    return f"{source}:{node.start_mark.line + 1}"


def _mapping_nodes(node):
    if isinstance(node, yaml.MappingNode):
        return {key.value: (key, value) for key, value in node.value}
    return {}


def _check_type(value, annotation, where):
    origin = typing.get_origin(annotation)
    if origin is typing.Union:
        args = [a for a in typing.get_args(annotation) if a is not type(None)]
        if value is None:
            return
        annotation = args[0] if len(args) == 1 else None
        origin = typing.get_origin(annotation) if annotation else None
    if annotation is None or value is None:
        return
    if annotation is bool and not isinstance(value, bool):
        raise ConfigError(f"{where}: expected a boolean, got {value!r}")
    if annotation is int and (isinstance(value, bool) or not isinstance(value, int)):
        raise ConfigError(f"{where}: expected an integer, got {value!r}")
    if annotation is float and (
        isinstance(value, bool) or not isinstance(value, (int, float))
    ):
        raise ConfigError(f"{where}: expected a number, got {value!r}")
    if annotation is str and not isinstance(value, str):
        raise ConfigError(f"{where}: expected a string, got {value!r}")
    if (annotation in (tuple, list) or origin in (tuple, list)) and not isinstance(
        value, (list, tuple)
    ):
        raise ConfigError(f"{where}: expected a list, got {value!r}")


def dataclass_from_dict(cls, data: dict, source: str = "<config>", node=None):
    """Build a (possibly nested) dataclass from a dict, reporting bad keys with lines

    Parameters
    ----------
    cls : type
        dataclass to instantiate
    data : dict
        values, typically parsed from YAML
    source : str, optional
        name of the file the values come from, by default "<config>"
    node : yaml.Node, optional
        YAML node the values were parsed from, used for line references

    Raises
    ------
    ConfigError
        on unknown keys, wrong value types or failing ``__post_init__`` checks
    """
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{_line(node, source)}: expected a mapping")

    hints = typing.get_type_hints(cls)
    fields = {f.name: f for f in dataclasses.fields(cls) if f.init}
    nodes = _mapping_nodes(node)
    kwargs = {}

    for key, value in data.items():
        key_node, value_node = nodes.get(key, (node, None))
        where = _line(key_node, source)
        if key not in fields:
            raise ConfigError(f"{where}: unknown key '{key}' for {cls.__name__}")

        annotation = hints[key]
        args = typing.get_args(annotation)
        if dataclasses.is_dataclass(annotation):
            value = dataclass_from_dict(annotation, value, source, value_node)
        elif (
            typing.get_origin(annotation) is list
            and args
            and dataclasses.is_dataclass(args[0])
        ):
            if not isinstance(value, list):
                raise ConfigError(f"{where}: expected a list for '{key}'")
            items = value_node.value if isinstance(value_node, yaml.SequenceNode) else []
            value = [
                dataclass_from_dict(
                    args[0], item, source, items[i] if i < len(items) else None
                )
                for i, item in enumerate(value)
            ]
        else:
            _check_type(value, annotation, f"{where}: '{key}'")
            is_tuple = annotation is tuple or typing.get_origin(annotation) is tuple
            if is_tuple and value is not None:
                value = tuple(value)
        kwargs[key] = value

    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{_line(node, source)}: {err}") from err


def load_config(path, cls):
    """Load a YAML file into the dataclass ``cls``

    Parameters
    ----------
    path : str or Path
        YAML file
    cls : type
        dataclass describing the config

    Returns
    -------
    instance of cls
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as err:
        raise ConfigError(f"{path}: cannot read config ({err})") from err

    try:
        node = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as err:
        mark = getattr(err, "problem_mark", None)
        where = f"{path}:{mark.line + 1}" if mark is not None else f"{path}"
        raise ConfigError(f"{where}: malformed YAML ({err})") from err

    return dataclass_from_dict(cls, data, str(path), node)
