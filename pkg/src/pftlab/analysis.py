"""Controlled aggregations over trial records and CSV / markdown reports.

All aggregations take the ok records of a store plus a ``configs`` mapping
from config_id to the tuple of corpora that config was pre-finetuned on.
"""
from __future__ import annotations

import csv
import math
import warnings
from collections import defaultdict
from dataclasses import astuple, dataclass, fields
from pathlib import Path

from .metrics import mean_and_stderr

NO_PFT = "No PFT"
ALL_PFT = "All PFT"


@dataclass(frozen=True)
class CurvePoint:
    k: int
    n_corpora: int
    mean: float
    stderr: float
    count: int


@dataclass(frozen=True)
class ContributionRow:
    k: int
    corpus: str
    delta: float
    count: int


@dataclass(frozen=True)
class InclusionExclusionRow:
    k: int
    corpus: str
    f1_in: float
    f1_ex: float
    delta: float

    @classmethod
    def from_means(cls, k: int, corpus: str, f1_in: float, f1_ex: float) -> "InclusionExclusionRow":
        return cls(k, corpus, f1_in, f1_ex, f1_in - f1_ex)


@dataclass(frozen=True)
class StratifiedPoint:
    language: str
    emotion: str
    config: str
    k: int
    mean: float
    count: int


CSV_NAMES = {
    CurvePoint: "curves.csv",
    ContributionRow: "contributions.csv",
    InclusionExclusionRow: "incl_excl.csv",
    StratifiedPoint: "stratified.csv",
}
MARKDOWN_HEADERS = {
    InclusionExclusionRow: ("k", "Corpus", "F1_in", "F1_ex", "Δ"),
}


class MissingCellError(ValueError):
    pass


def _config_map(configs) -> dict[int, frozenset]:
    if isinstance(configs, dict):
        return {int(j): frozenset(c) for j, c in configs.items()}
    return {c.config_id: frozenset(c.corpora) for c in configs}


def _ok(records):
    return [r for r in records if r.status == "ok"]


def _full_set(cmap) -> frozenset:
    return frozenset().union(*cmap.values())


def n_corpora_curves(records, configs) -> list[CurvePoint]:
    """Mean and stderr of macro F1 per (k, number of pre-finetuning corpora), pooled by record."""
    cmap = _config_map(configs)
    cells = defaultdict(list)
    for r in _ok(records):
        cells[r.k, len(cmap[r.config_id])].append(r.macro_f1)
    ks = sorted({k for k, _ in cells})
    sizes = sorted({len(c) for c in cmap.values()})
    out = []
    for k in ks:
        for n in sizes:
            vals = cells.get((k, n))
            if not vals:
                warnings.warn(f"no ok records for k={k}, n_corpora={n}; cell omitted")
                continue
            mean, se = mean_and_stderr(vals)
            out.append(CurvePoint(k, n, mean, se, len(vals)))
    return out


def _cells(records):
    """(k, speaker, emotion) -> list of records."""
    out = defaultdict(list)
    for r in _ok(records):
        out[r.k, r.speaker, r.emotion].append(r)
    return out


def _mean(vals) -> float:
    return math.fsum(vals) / len(vals)


def corpus_contributions(records, configs, weighting: str = "cell") -> list[ContributionRow]:
    """Mean F1 of configs containing each corpus minus the no-pre-finetuning mean, per controlled cell.

    ``weighting="cell"`` averages cell differentials unweighted;
    ``"record"`` weights each cell by its number of records containing the corpus.
    """
    if weighting not in ("cell", "record"):
        raise ValueError(f"weighting must be 'cell' or 'record', got {weighting!r}")
    cmap = _config_map(configs)
    corpora = sorted(_full_set(cmap))
    diffs = defaultdict(list)  # (k, corpus) -> [(differential, weight)]
    for (k, spk, emo), recs in sorted(_cells(records).items()):
        base = [r.macro_f1 for r in recs if not cmap[r.config_id]]
        for c in corpora:
            with_c = [r.macro_f1 for r in recs if c in cmap[r.config_id]]
            if not with_c:
                continue
            if not base:
                raise MissingCellError(f"no baseline records for k={k}, speaker={spk}, emotion={emo}")
            diffs[k, c].append((_mean(with_c) - _mean(base), len(with_c)))
    out = []
    for (k, c), ds in sorted(diffs.items()):
        if weighting == "cell":
            delta = _mean([d for d, _ in ds])
        else:
            delta = math.fsum(d * w for d, w in ds) / sum(w for _, w in ds)
        out.append(ContributionRow(k, c, delta, len(ds)))
    return out


def inclusion_exclusion(records, configs) -> list[InclusionExclusionRow]:
    """Controlled mean F1 of the singleton config {c} against the config of all corpora but c."""
    cmap = _config_map(configs)
    full = _full_set(cmap)
    by_set = {s: j for j, s in cmap.items()}
    out = []
    cells = _cells(records)
    for c in sorted(full):
        j_in, j_ex = by_set.get(frozenset({c})), by_set.get(full - {c})
        if j_in is None or j_ex is None:
            raise MissingCellError(f"configs for {{{c}}} and its complement are both required")
        per_k = defaultdict(lambda: ([], []))
        for (k, spk, emo), recs in sorted(cells.items()):
            f_in = [r.macro_f1 for r in recs if r.config_id == j_in]
            f_ex = [r.macro_f1 for r in recs if r.config_id == j_ex]
            if not f_in and not f_ex:
                continue
            if not f_in or not f_ex:
                which = "{" + c + "}" if not f_in else f"all but {c}"
                raise MissingCellError(f"missing records for config {which} at k={k}, speaker={spk}, emotion={emo}")
            per_k[k][0].append(_mean(f_in))
            per_k[k][1].append(_mean(f_ex))
        for k, (ins, exs) in sorted(per_k.items()):
            out.append(InclusionExclusionRow.from_means(k, c, _mean(ins), _mean(exs)))
    out.sort(key=lambda r: (r.k, r.corpus))
    return out


def stratified_curves(records, configs, speaker_language: dict[str, str], emotions=None,
                      languages=("English", "Mandarin")) -> list[StratifiedPoint]:
    """Mean macro F1 per (language, emotion, k) for the empty and the full config."""
    cmap = _config_map(configs)
    full = _full_set(cmap)
    label = {j: (NO_PFT if not s else ALL_PFT) for j, s in cmap.items() if not s or s == full}
    groups = defaultdict(list)
    for r in _ok(records):
        if r.config_id in label:
            groups[speaker_language[r.speaker], r.emotion, label[r.config_id], r.k].append(r.macro_f1)
    emotions = list(emotions) if emotions is not None else sorted({e for _, e, _, _ in groups})
    present_langs = {l for l, _, _, _ in groups}
    for lang in languages:
        if lang not in present_langs:
            warnings.warn(f"no records for language {lang!r}; strata omitted")
    ks = sorted({k for *_, k in groups})
    out = []
    for lang in languages:
        if lang not in present_langs:
            continue
        for emo in emotions:
            for cfg in (NO_PFT, ALL_PFT):
                for k in ks:
                    vals = groups.get((lang, emo, cfg, k))
                    if not vals:
                        warnings.warn(f"no records for {lang}/{emo}/{cfg}/k={k}; stratum omitted")
                        continue
                    out.append(StratifiedPoint(lang, emo, cfg, k, _mean(vals), len(vals)))
    return out


# ---------------------------------------------------------------- reports


def _fmt(v) -> str:
    return f"{v:.4f}" if isinstance(v, float) else str(v)


def to_markdown(rows) -> str:
    rows = list(rows)
    if not rows:
        raise ValueError("no rows to report")
    cls = type(rows[0])
    headers = MARKDOWN_HEADERS.get(cls, tuple(f.name for f in fields(cls)))
    lines = ["| " + " | ".join(headers) + " |", "|" + "---|" * len(headers)]
    for r in rows:
        lines.append("| " + " | ".join(_fmt(v) for v in astuple(r)) + " |")
    return "\n".join(lines) + "\n"


def emit_report(rows, path, fmt: str = "csv") -> Path:
    """Write rows as CSV (exact float repr) or markdown (4 decimals)."""
    rows = list(rows)
    if not rows:
        raise ValueError("no rows to report")
    if fmt not in ("csv", "markdown"):
        raise ValueError(f"unknown report format {fmt!r}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "markdown":
        path.write_text(to_markdown(rows))
        return path
    cls = type(rows[0])
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow([fl.name for fl in fields(cls)])
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in astuple(r)])
    return path


def read_report(path, cls):
    types = {fl.name: fl.type for fl in fields(cls)}
    out = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != tuple(types):
            raise ValueError(f"{path}: columns {reader.fieldnames} do not match {cls.__name__}")
        for row in reader:
            out.append(cls(**{k: {"int": int, "float": float}.get(t, str)(row[k]) for k, t in types.items()}))
    return out
