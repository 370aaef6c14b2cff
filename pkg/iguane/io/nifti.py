from pathlib import Path

import nibabel as nib
import numpy as np

from iguane.core.volume import BACKGROUND, Space, Volume
from iguane.errors import ValidationError

NIFTI_EXTENSIONS = (".nii.gz", ".nii")


def stem(path) -> str:
    """File name without its NIfTI extension"""
    name = Path(path).name
    for ext in NIFTI_EXTENSIONS:
        if name.endswith(ext):
            return name[: -len(ext)]
    return Path(path).stem


def mask_path(path) -> Path:
    """Mask sidecar of a volume file: ``<name>_mask.nii.gz``"""
    path = Path(path)
    return path.parent / f"{stem(path)}_mask.nii.gz"


def get_files(folder, depth=0, extension=".nii.gz"):
    """Return NIfTI files (mask sidecars excluded) in ``folder`` and its sub-folders

    Parameters
    ----------
    folder : str or Path
        folder to be searched
    depth : int
        number of sub-folder layers to look into, by default 0 (only ``folder``)
    extension : str, optional
        file extension, by default ".nii.gz"

    Returns
    -------
    list of Path
    """
    folder = Path(folder)
    files = []
    for d in range(depth + 1):
        files += folder.glob("*/" * d + f"*{extension}")
    return sorted(
        f.absolute()
        for f in files
        if f.is_file() and not stem(f).endswith("_mask")
    )


def parse_description(descrip) -> dict:
    """Parse the ``key=value`` pairs written by :py:func:`save_volume` in the header

    ``descrip`` is the header field as nibabel returns it (a 0-d ``|S80`` array),
    bytes or str.
    """
    descrip = np.asarray(descrip).item()
    if isinstance(descrip, bytes):
        descrip = descrip.decode("ascii", errors="ignore")
    fields = {}
    for token in str(descrip).replace("\x00", " ").split():
        if "=" in token:
            key, value = token.split("=", 1)
            fields[key] = value
    return fields


def load_volume(path, mask=None) -> Volume:
    """Load a NIfTI-1 volume and its optional mask sidecar

    Parameters
    ----------
    path : str or Path
        NIfTI file
    mask : str or Path, optional
        mask file, by default the ``<name>_mask.nii.gz`` sidecar if it exists

    Returns
    -------
    Volume
        with ``space`` restored from the header description when written by iguane,
        ``raw`` otherwise

    Raises
    ------
    FileNotFoundError
        if the file does not exist
    ValidationError
        if the mask dimensions differ from the image dimensions
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{path} does not exist")

    image = nib.load(str(path))
    data = np.asanyarray(image.dataobj, dtype=np.float64)
    if data.ndim == 4 and data.shape[-1] == 1:
        data = data[..., 0]
    if data.ndim != 3:
        raise ValidationError(f"{path}: expected a 3D volume, got shape {data.shape}")

    mask = mask_path(path) if mask is None else Path(mask)
    if mask.exists():
        mask_data = np.asanyarray(nib.load(str(mask)).dataobj) > 0
        if mask_data.shape != data.shape:
            raise ValidationError(
                f"{mask}: mask dimensions {mask_data.shape} differ from image dimensions {data.shape}"
            )
    else:
        mask_data = None

    header = image.header
    fields = parse_description(header["descrip"])
    try:
        space = Space(fields.get("space", Space.RAW.value))
        background = float(fields.get("bg", BACKGROUND[space]))
    except ValueError as e:
        raise ValidationError(f"{path}: unreadable header description ({e})") from e

    return Volume(
        data=data,
        mask=mask_data,
        voxel_size=tuple(float(z) for z in header.get_zooms()[:3]),
        space=space,
        background_value=background,
        normalization=fields.get("norm"),
        affine=np.array(image.affine, dtype=np.float64),
        metadata={"path": str(path)},
    )


def save_volume(vol: Volume, path, provenance=None):
    """Write a volume as NIfTI-1 (float32) with its mask sidecar (uint8)

    The header description records the intensity space, normalization and the
    ``cfg``/``seed`` entries of ``provenance``.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    provenance = provenance or {}

    tokens = [f"space={vol.space.value}"]
    if vol.normalization:
        tokens.append(f"norm={vol.normalization}")
    if vol.background_value != BACKGROUND[vol.space]:
        tokens.append(f"bg={vol.background_value:.6g}")
    if provenance.get("cfg"):
        tokens.append(f"cfg={str(provenance['cfg'])[:8]}")
    if provenance.get("seed") is not None:
        tokens.append(f"seed={provenance['seed']}")
    # NIfTI-1 descrip holds 80 bytes
    descrip = " ".join(tokens)[:79]

    image = nib.Nifti1Image(np.asarray(vol.data, dtype=np.float32), vol.affine)
    image.header.set_zooms(vol.voxel_size)
    image.header["descrip"] = descrip
    nib.save(image, str(path))

    mask = nib.Nifti1Image(vol.mask.astype(np.uint8), vol.affine)
    mask.header.set_zooms(vol.voxel_size)
    nib.save(mask, str(mask_path(path)))
