import os
from pathlib import Path

import numpy as np
import pandas as pd

from iguane.errors import ValidationError

COLUMNS = ["path", "subject_id", "site_id", "age", "sex", "diagnosis"]
"""Fixed manifest header"""

AGE_RANGE = (18.0, 80.0)


class Manifest:
    """
    A table of volumes with their subject, site and demographic information.

    Relative paths are resolved against ``root`` (the folder of the CSV file when loaded
    with :py:meth:`from_csv`). Columns other than the fixed header (e.g. ``status`` and
    ``reason`` written by ``iguane preprocess``) are preserved.

    Parameters
    ----------
    df : pandas.DataFrame
        manifest rows
    root : str or Path, optional
        folder relative paths are resolved against, by default the working directory
    """

    def __init__(self, df: pd.DataFrame, root=None):
        self.root = Path(root) if root is not None else Path.cwd()
        self.df = self._validate(df.reset_index(drop=True).copy())

    @staticmethod
    def _validate(df):
        missing = [c for c in COLUMNS if c not in df.columns]
        if missing:
            raise ValidationError(f"manifest is missing column(s) {', '.join(missing)}")

        for column in ["path", "subject_id", "site_id", "sex", "diagnosis"]:
            df[column] = df[column].astype(object).where(df[column].notna(), "")
            df[column] = df[column].astype(str)

        if (df["site_id"].str.strip() == "").any():
            rows = list(np.flatnonzero(df["site_id"].str.strip() == ""))
            raise ValidationError(f"column 'site_id' is empty at row(s) {rows}")

        # outputs and evaluation rows are keyed by (subject_id, site_id)
        named = df[df["subject_id"].str.strip() != ""]
        duplicated = named.duplicated(["subject_id", "site_id"], keep=False)
        if duplicated.any():
            pairs = sorted(set(zip(named["subject_id"][duplicated], named["site_id"][duplicated])))
            raise ValidationError(
                "duplicate (subject_id, site_id) pair(s) "
                + ", ".join(f"({s}, {site})" for s, site in pairs)
                + "; give repeat sessions distinct subject ids"
            )

        try:
            df["age"] = pd.to_numeric(df["age"])
        except (ValueError, TypeError) as err:
            raise ValidationError(f"column 'age' must be numeric ({err})") from err
        age = df["age"].to_numpy(dtype=float)
        out = np.isfinite(age) & ((age < AGE_RANGE[0]) | (age > AGE_RANGE[1]))
        if out.any():
            raise ValidationError(
                f"column 'age' outside [{AGE_RANGE[0]:.0f}, {AGE_RANGE[1]:.0f}] at row(s) {list(np.flatnonzero(out))}"
            )
        return df

    @classmethod
    def from_csv(cls, path):
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"{path} does not exist")
        df = pd.read_csv(
            path,
            dtype={"path": str, "subject_id": str, "site_id": str, "sex": str, "diagnosis": str},
            keep_default_na=False,
            na_values={"age": [""]},
        )
        return cls(df, root=path.parent)

    @classmethod
    def from_rows(cls, rows, root=None):
        df = pd.DataFrame(list(rows))
        if len(df) == 0:
            df = pd.DataFrame(columns=COLUMNS)
        return cls(df, root=root)

    def to_csv(self, path):
        """Write the manifest, with paths relative to the destination folder when possible"""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        df = self.df.copy()
        df["path"] = [self._relative(p, path.parent) for p in df["path"]]
        columns = COLUMNS + [c for c in df.columns if c not in COLUMNS]
        df[columns].to_csv(path, index=False)

    def _relative(self, p, folder):
        absolute = self.resolve(p)
        try:
            return Path(os.path.relpath(absolute, Path(folder).absolute())).as_posix()
        except ValueError:
            return str(absolute)

    def resolve(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else (self.root / p).absolute()

    def __len__(self):
        return len(self.df)

    def __getitem__(self, i) -> dict:
        return self.df.iloc[i].to_dict()

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    @property
    def paths(self) -> list:
        """Absolute paths of all volumes"""
        return [self.resolve(p) for p in self.df["path"]]

    @property
    def sites(self) -> list:
        """Site ids, in order of first appearance"""
        return list(dict.fromkeys(self.df["site_id"]))

    @property
    def subjects(self) -> list:
        return list(dict.fromkeys(self.df["subject_id"]))

    def site(self, site_id) -> "Manifest":
        """Rows of a single site"""
        if site_id not in self.sites:
            raise ValidationError(f"site '{site_id}' not in manifest")
        return Manifest(self.df[self.df["site_id"] == site_id], root=self.root)

    def select(self, mask) -> "Manifest":
        return Manifest(self.df[np.asarray(mask, dtype=bool)], root=self.root)

    def traveling_subjects(self) -> list:
        """Subjects imaged in more than one site"""
        n_sites = self.df.groupby("subject_id", sort=False)["site_id"].nunique()
        return list(n_sites[n_sites > 1].index)

    def metadata(self, i) -> dict:
        """Row ``i`` as volume metadata (absolute path)"""
        row = self[i]
        row["path"] = str(self.resolve(row["path"]))
        if isinstance(row.get("age"), float) and np.isnan(row["age"]):
            row["age"] = None
        return row

    def require(self, *columns):
        """Raise a ValidationError naming the first missing column"""
        for column in columns:
            if column not in self.df.columns:
                raise ValidationError(f"manifest is missing column '{column}'")

    def __repr__(self):
        return (
            f"Manifest({len(self)} volumes, {len(self.subjects)} subjects, "
            f"sites: {', '.join(self.sites)})"
        )
