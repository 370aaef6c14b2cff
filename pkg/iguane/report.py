import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from tabulate import tabulate

from iguane.config import plain
from iguane.stats import benjamini_hochberg


@dataclass
class EvaluationReport:
    """Per-group metrics of one analysis and method, with raw and BH-adjusted p-values

    Rows are dictionaries holding at least ``group`` and ``n``; rows with a ``p`` entry
    form the p-value family adjusted by :py:meth:`adjust`.
    """

    analysis: str
    method: str = None
    rows: list = field(default_factory=list)
    config_hash: str = None
    seed: int = None
    notes: list = field(default_factory=list)

    def add(self, group, n, p=None, **metrics):
        row = dict(group=str(group), n=int(n), **metrics)
        if p is not None:
            row["p"] = float(p)
        self.rows.append(row)
        return row

    @property
    def family_size(self) -> int:
        return sum("p" in row for row in self.rows)

    def adjust(self):
        """Benjamini-Hochberg adjustment over every row holding a p-value"""
        family = [row for row in self.rows if "p" in row]
        adjusted = benjamini_hochberg([row["p"] for row in family])
        for row, p_adj in zip(family, adjusted):
            row["p_adj"] = float(p_adj)
        return self

    def to_dict(self) -> dict:
        return plain(
            dict(
                analysis=self.analysis,
                method=self.method,
                family_size=self.family_size,
                config_hash=self.config_hash,
                seed=self.seed,
                notes=list(self.notes),
                rows=self.rows,
            )
        )

    def dataframe(self) -> pd.DataFrame:
        df = pd.DataFrame(self.rows)
        df.insert(0, "analysis", self.analysis)
        if "method" not in df.columns:
            df.insert(1, "method", self.method)
        return df

    def to_json(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)

    def to_csv(self, path):
        self.dataframe().to_csv(path, index=False, float_format="%.10g")

    def table(self) -> str:
        rows = [
            {k: (f"{v:.4g}" if isinstance(v, (float, np.floating)) else v) for k, v in row.items()}
            for row in self.rows
        ]
        title = self.analysis if self.method is None else f"{self.analysis} ({self.method})"
        return f"{title}\n" + tabulate(rows, headers="keys", tablefmt="fancy_grid")

    def __str__(self):
        return self.table()

    def save(self, folder, stem=None):
        """Write ``{stem}.json`` and ``{stem}.csv`` in ``folder``"""
        folder = Path(folder)
        folder.mkdir(parents=True, exist_ok=True)
        stem = stem or "_".join(s for s in (self.analysis, self.method) if s)
        self.to_json(folder / f"{stem}.json")
        self.to_csv(folder / f"{stem}.csv")
        return folder / f"{stem}.json", folder / f"{stem}.csv"
