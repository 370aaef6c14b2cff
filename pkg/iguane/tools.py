import inspect
import os
import shlex
import subprocess
from dataclasses import asdict, dataclass
from pathlib import Path

import yaml

from iguane import CONFIG
from iguane.console_utils import info
from iguane.errors import AdapterError, ConfigError

STEPS = ("skull_strip", "bias_correction", "registration")
"""External preprocessing steps, in the order they are run"""


@dataclass
class ToolConfig:
    """Command templates of the external preprocessing tools

    This is a Python Data Class, so that all attributes described below can be used as
    keyword-arguments when instantiating a ToolConfig. Templates are formatted with
    ``{input}``, ``{output}``, ``{mask}`` and ``{template}`` before being run.
    """

    name: str = "none"
    """Name taken by the configuration if saved"""

    names: tuple = ()
    """Alternative names the configuration can be retrieved with"""

    skull_strip: str = None
    """skull-stripping command, expected to write ``<output>_mask.nii.gz`` too"""

    bias_correction: str = None
    """bias field correction command"""

    registration: str = None
    """rigid (6 dof) registration command to the 1 mm3 ``template``"""

    template: str = None
    """registration target"""

    pre_stripped: bool = True
    """whether inputs are already skull-stripped and registered (tools bypassed)"""

    keep_intermediate: bool = False
    """whether to keep the outputs of each step"""

    save: bool = False

    def __post_init__(self):
        self.names = tuple(self.names)
        if self.save:
            tools_dict = asdict(self)
            del tools_dict["save"]
            tools_dict["names"] = list(self.names)
            CONFIG.save_tools_file(tools_dict)

    @classmethod
    def from_dict(cls, env):
        """Load from a dict ensuring that only class attributes are used"""
        return cls(
            **{k: v for k, v in env.items() if k in inspect.signature(cls).parameters}
        )

    @classmethod
    def load(cls, filename):
        try:
            with open(filename, "r") as f:
                return cls.from_dict(yaml.safe_load(f) or {})
        except yaml.YAMLError as err:
            raise ConfigError(f"{filename}: malformed tools file ({err})") from err

    @classmethod
    def from_name(cls, name, verbose=True, strict=False):
        tools_dict = CONFIG.match_tools_name(name)
        if tools_dict is not None:
            return cls.from_dict(tools_dict)
        if strict:
            raise ConfigError(f"no external tools configuration named '{name}'")
        if verbose:
            info(f"tools {name} not found - using default (pre-stripped inputs)")
        return cls(name=name)

    @classmethod
    def from_env(cls):
        """Configuration named (or pointed to) by the ``IGUANE_TOOLS`` environment variable"""
        value = os.environ.get("IGUANE_TOOLS")
        if not value:
            return cls()
        if Path(value).exists():
            return cls.load(value)
        return cls.from_name(value, strict=True)

    @property
    def steps(self) -> list:
        """(step, template) pairs to run, empty when inputs are pre-stripped"""
        if self.pre_stripped:
            return []
        return [(step, getattr(self, step)) for step in STEPS if getattr(self, step)]

    def command(self, step, **placeholders) -> list:
        template = getattr(self, step)
        quoted = {k: shlex.quote(str(v)) for k, v in placeholders.items()}
        try:
            line = template.format(template=shlex.quote(str(self.template)), **quoted)
        except KeyError as err:
            raise ConfigError(
                f"tools '{self.name}': unknown placeholder {err} in {step} command"
            ) from err
        return shlex.split(line)

    def run(self, step, **placeholders):
        """Run one step, raising :py:class:`AdapterError` with diagnostics on failure"""
        command = self.command(step, **placeholders)
        line = " ".join(command)
        try:
            result = subprocess.run(command, capture_output=True, text=True)
        except OSError as err:
            raise AdapterError(line, None, str(err)) from err
        if result.returncode != 0:
            raise AdapterError(line, result.returncode, result.stderr)
        return result
