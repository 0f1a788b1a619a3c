"""Corpus schema, synthetic corpus suite, and the on-disk corpus format.

A corpus on disk is a directory with two files:

* ``manifest`` -- JSON: name, labels, dim, split counts and one
  ``[speaker, language, label, split]`` row per utterance.
* ``features`` -- ``b"PFTFEAT1"``, u32 count, u32 dim, then row-major
  little-endian float64.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

SPLITS = ("train", "validation", "test")
LANGUAGES = ("English", "Mandarin")
FEATURE_MAGIC = b"PFTFEAT1"

DOWNSTREAM_NAME = "esd"
DOWNSTREAM_EMOTIONS = ("Happy", "Sad", "Surprised", "Angry", "Neutral")

# label name -> shared emotion concept; labels not listed here map to themselves
CONCEPTS = {
    "happy": "happy", "happiness": "happy", "elation": "happy", "Happy": "happy",
    "sadness": "sad", "Sad": "sad",
    "anger": "angry", "Angry": "angry",
    "neutral": "neutral", "Neutral": "neutral",
    "surprised": "surprise", "surprise": "surprise", "Surprised": "surprise",
    "panic": "fear",
}


class CorpusFormatError(ValueError):
    pass


@dataclass(frozen=True)
class LabelSpace:
    names: tuple[str, ...]

    def __post_init__(self):
        if len(self.names) < 2:
            raise ValueError("a label space needs at least 2 labels")
        if len(set(self.names)) != len(self.names):
            raise ValueError(f"duplicate label names in {self.names}")

    @property
    def n(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)


@dataclass(frozen=True)
class Utterance:
    features: np.ndarray
    label: int
    speaker_id: str
    language: str


class Corpus:
    """Immutable column store of labelled, speaker-attributed feature vectors."""

    def __init__(self, name, label_space, features, labels, speakers, languages, splits):
        self.name = str(name)
        self.label_space = label_space if isinstance(label_space, LabelSpace) else LabelSpace(tuple(label_space))
        self.features = np.array(features, dtype=np.float64)
        self.labels = np.array(labels, dtype=np.int64)
        self.speakers = np.array(speakers, dtype=str)
        self.languages = np.array(languages, dtype=str)
        self.splits = np.array(splits, dtype=str)
        self._validate()
        for arr in (self.features, self.labels, self.speakers, self.languages, self.splits):
            arr.flags.writeable = False
        self._split_idx = {s: np.flatnonzero(self.splits == s) for s in SPLITS}

    def _validate(self) -> None:
        n = len(self.labels)
        if self.features.ndim != 2 or self.features.shape[0] != n or self.features.shape[1] < 1:
            raise CorpusFormatError(f"{self.name}: features {self.features.shape} do not match {n} labels")
        if not np.isfinite(self.features).all():
            raise CorpusFormatError(f"{self.name}: non-finite features")
        for col, arr in (("speakers", self.speakers), ("languages", self.languages), ("splits", self.splits)):
            if arr.shape != (n,):
                raise CorpusFormatError(f"{self.name}: {col} has {arr.shape[0]} rows, expected {n}")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.label_space.n):
            raise CorpusFormatError(f"{self.name}: label out of range for {self.label_space.n} labels")
        bad = set(self.splits.tolist()) - set(SPLITS)
        if bad:
            raise CorpusFormatError(f"{self.name}: unknown split(s) {sorted(bad)}")
        bad = set(self.languages.tolist()) - set(LANGUAGES)
        if bad:
            raise CorpusFormatError(f"{self.name}: unknown language(s) {sorted(bad)}")
        missing = set(range(self.label_space.n)) - set(self.labels[self.splits == "train"].tolist())
        if missing:
            raise CorpusFormatError(
                f"{self.name}: labels {[self.label_space.names[i] for i in sorted(missing)]} absent from train")

    def __len__(self) -> int:
        return len(self.labels)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Corpus):
            return NotImplemented
        return (self.name == other.name and self.label_space == other.label_space
                and self.features.tobytes() == other.features.tobytes()
                and self.features.shape == other.features.shape
                and np.array_equal(self.labels, other.labels)
                and np.array_equal(self.speakers, other.speakers)
                and np.array_equal(self.languages, other.languages)
                and np.array_equal(self.splits, other.splits))

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def utterance(self, i: int) -> Utterance:
        return Utterance(self.features[i], int(self.labels[i]), str(self.speakers[i]), str(self.languages[i]))

    @property
    def utterances(self) -> list[Utterance]:
        return [self.utterance(i) for i in range(len(self))]

    def split_indices(self, split: str) -> np.ndarray:
        return self._split_idx[split]

    def split(self, split: str) -> tuple[np.ndarray, np.ndarray]:
        idx = self._split_idx[split]
        return self.features[idx], self.labels[idx]

    @property
    def speaker_ids(self) -> list[str]:
        return sorted(set(self.speakers.tolist()))

    def speaker_language(self, speaker_id: str) -> str:
        rows = np.flatnonzero(self.speakers == speaker_id)
        if not len(rows):
            raise KeyError(f"unknown speaker {speaker_id!r} in {self.name}")
        return str(self.languages[rows[0]])

    def summary(self) -> dict:
        return {
            "name": self.name,
            "labels": list(self.label_space.names),
            "dim": self.dim,
            "utterances": len(self),
            "speakers": len(self.speaker_ids),
            **{s: int(len(self._split_idx[s])) for s in SPLITS},
        }


# ---------------------------------------------------------------- synthetic suite


@dataclass(frozen=True)
class CorpusTemplate:
    name: str
    labels: tuple[str, ...]
    n_speakers: int
    n_utterances: int
    mandarin_fraction: float = 0.0


# Label spaces follow the four pre-finetuning corpora; sizes are the reported
# utterance counts divided by 40.
DEFAULT_CORPORA = (
    CorpusTemplate("msp_improv", ("happy", "sadness", "anger", "neutral"), 12, 211),
    CorpusTemplate("msp_podcast", ("anger", "happiness", "sadness", "disgust", "surprised",
                                   "fear", "contempt", "neutral", "other"), 60, 1554),
    CorpusTemplate("mandarin_as", ("anger", "elation", "neutral", "panic", "sadness"), 68, 641, 1.0),
    CorpusTemplate("iemocap", ("anger", "happiness", "excitement", "sadness", "frustration",
                               "fear", "surprise", "other", "neutral"), 10, 251),
)


@dataclass(frozen=True)
class SynthSpec:
    corpora: tuple[CorpusTemplate, ...] = DEFAULT_CORPORA
    feature_dim: int = 16
    shared_dim: int = 6
    transfer_strength: float = 0.8
    separation: float = 1.0
    noise_scale: float = 1.0
    nuisance_dim: int = 4
    nuisance_scale: float = 2.0
    speaker_scale: float = 0.5
    language_scale: float = 0.5
    speakers_per_language: int = 10
    downstream_train_per_class: int = 80
    downstream_test_per_class: int = 40
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 <= self.transfer_strength <= 1.0:
            raise ValueError(f"transfer_strength must be in [0, 1], got {self.transfer_strength}")
        if self.noise_scale < 0:
            raise ValueError(f"noise_scale must be >= 0, got {self.noise_scale}")
        for name in ("feature_dim", "shared_dim", "speakers_per_language",
                     "downstream_train_per_class", "downstream_test_per_class"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.shared_dim + self.nuisance_dim > self.feature_dim:
            raise ValueError("shared_dim + nuisance_dim cannot exceed feature_dim")
        if self.nuisance_dim < 0 or self.nuisance_scale < 0:
            raise ValueError("nuisance_dim and nuisance_scale must be >= 0")
        names = [t.name for t in self.corpora]
        if len(set(names)) != len(names) or DOWNSTREAM_NAME in names:
            raise ValueError(f"corpus names must be unique and not {DOWNSTREAM_NAME!r}: {names}")
        for t in self.corpora:
            LabelSpace(t.labels)
            if t.n_speakers < 1 or t.n_utterances < 3 * len(t.labels):
                raise ValueError(f"{t.name}: needs >= 1 speaker and >= 3 utterances per label")
            if not 0.0 <= t.mandarin_fraction <= 1.0:
                raise ValueError(f"{t.name}: mandarin_fraction must be in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        d = dict(d)
        if "corpora" in d:
            d["corpora"] = tuple(
                CorpusTemplate(c["name"], tuple(c["labels"]), c["n_speakers"], c["n_utterances"],
                               c.get("mandarin_fraction", 0.0))
                for c in d["corpora"])
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ValueError(f"unknown synth fields: {sorted(unknown)}")
        return cls(**d)


def concept(label: str) -> str:
    return CONCEPTS.get(label, label.lower())


@dataclass
class _Geometry:
    prototypes: dict[str, np.ndarray]
    nuisance: np.ndarray  # (feature_dim, nuisance_dim), orthogonal to the prototypes
    private: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    language: dict[str, np.ndarray] = field(default_factory=dict)


def _geometry(spec: SynthSpec, rng: np.random.Generator) -> _Geometry:
    concepts = sorted({concept(l) for t in spec.corpora for l in t.labels}
                      | {concept(l) for l in DOWNSTREAM_EMOTIONS})
    basis, _ = np.linalg.qr(rng.normal(size=(spec.feature_dim, spec.shared_dim + spec.nuisance_dim)))
    shared, nuisance = basis[:, :spec.shared_dim], basis[:, spec.shared_dim:]

    def scaled(v):
        return v * (spec.separation / np.linalg.norm(v))

    geo = _Geometry({c: scaled(shared @ rng.normal(size=spec.shared_dim)) for c in concepts}, nuisance)
    for t in spec.corpora:
        geo.private[t.name] = {l: scaled(rng.normal(size=spec.feature_dim)) for l in t.labels}
    for lang in LANGUAGES:
        geo.language[lang] = rng.normal(size=spec.feature_dim) * spec.language_scale / np.sqrt(spec.feature_dim)
    return geo


def class_means(spec: SynthSpec) -> dict[str, dict[str, np.ndarray]]:
    """Noise-free class means per corpus, keyed by corpus then label name."""
    geo = _geometry(spec, np.random.default_rng(spec.seed))
    ts = spec.transfer_strength
    out = {t.name: {l: ts * geo.prototypes[concept(l)] + (1 - ts) * geo.private[t.name][l] for l in t.labels}
           for t in spec.corpora}
    out[DOWNSTREAM_NAME] = {e: geo.prototypes[concept(e)] for e in DOWNSTREAM_EMOTIONS}
    return out


def _noise(spec, geo, rng, n):
    """Isotropic noise plus extra variance along the nuisance directions."""
    iso = rng.normal(size=(n, spec.feature_dim)) * spec.noise_scale / np.sqrt(spec.feature_dim)
    if not spec.nuisance_dim:
        return iso
    extra = rng.normal(size=(n, spec.nuisance_dim)) * spec.nuisance_scale / np.sqrt(spec.nuisance_dim)
    return iso + extra @ geo.nuisance.T


def _speaker_offsets(spec, rng, n):
    return rng.normal(size=(n, spec.feature_dim)) * spec.speaker_scale / np.sqrt(spec.feature_dim)


def _prefinetune_corpus(spec, t, means, geo, rng) -> Corpus:
    n_lab = len(t.labels)
    offsets = _speaker_offsets(spec, rng, t.n_speakers)
    n_mand = int(round(t.mandarin_fraction * t.n_speakers))
    spk_lang = ["Mandarin"] * n_mand + ["English"] * (t.n_speakers - n_mand)
    # every label gets at least 3 rows so train/validation/test all see it
    labels = np.concatenate([np.repeat(np.arange(n_lab), 3),
                             rng.integers(0, n_lab, size=t.n_utterances - 3 * n_lab)])
    rng.shuffle(labels)
    speakers = rng.integers(0, t.n_speakers, size=t.n_utterances)
    mean_mat = np.stack([means[l] for l in t.labels])
    lang_mat = np.stack([geo.language[spk_lang[s]] for s in speakers])
    noise = _noise(spec, geo, rng, t.n_utterances)
    feats = mean_mat[labels] + offsets[speakers] + lang_mat + noise

    splits = np.empty(t.n_utterances, dtype=object)
    for lab in range(n_lab):
        idx = rng.permutation(np.flatnonzero(labels == lab))
        n_val = max(1, int(round(0.1 * len(idx))))
        n_test = max(1, int(round(0.1 * len(idx))))
        splits[idx[:n_val]] = "validation"
        splits[idx[n_val:n_val + n_test]] = "test"
        splits[idx[n_val + n_test:]] = "train"
    return Corpus(t.name, LabelSpace(t.labels), feats, labels,
                  [f"{t.name}_s{s:03d}" for s in speakers], [spk_lang[s] for s in speakers], splits.tolist())


def _downstream_corpus(spec, means, geo, rng) -> Corpus:
    n_spk = 2 * spec.speakers_per_language
    offsets = _speaker_offsets(spec, rng, n_spk)
    per = spec.downstream_train_per_class + spec.downstream_test_per_class
    feats, labels, speakers, langs, splits = [], [], [], [], []
    for s in range(n_spk):
        lang = "English" if s < spec.speakers_per_language else "Mandarin"
        sid = f"{'en' if lang == 'English' else 'zh'}_{s % spec.speakers_per_language + 1:02d}"
        for e, emo in enumerate(DOWNSTREAM_EMOTIONS):
            noise = _noise(spec, geo, rng, per)
            feats.append(means[emo] + offsets[s] + geo.language[lang] + noise)
            labels += [e] * per
            speakers += [sid] * per
            langs += [lang] * per
            splits += ["train"] * spec.downstream_train_per_class + ["test"] * spec.downstream_test_per_class
    return Corpus(DOWNSTREAM_NAME, LabelSpace(DOWNSTREAM_EMOTIONS), np.concatenate(feats), labels,
                  speakers, langs, splits)


def generate_suite(spec: SynthSpec | None = None) -> tuple[list[Corpus], Corpus]:
    """Four pre-finetuning corpora plus the 20-speaker downstream corpus.

    Class means mix a shared emotion prototype (weight ``transfer_strength``)
    with a corpus-private offset; utterances add a speaker offset, a
    language offset and Gaussian noise.  Pure function of ``spec``.
    """
    spec = spec or SynthSpec()
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    geo = _geometry(spec, rng)
    means = class_means(spec)
    corpora = [_prefinetune_corpus(spec, t, means[t.name], geo, rng) for t in spec.corpora]
    return corpora, _downstream_corpus(spec, means[DOWNSTREAM_NAME], geo, rng)


# ---------------------------------------------------------------- disk format


def save_corpus(corpus: Corpus, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {
        "name": corpus.name,
        "labels": list(corpus.label_space.names),
        "dim": corpus.dim,
        "count": len(corpus),
        "splits": {s: int(len(corpus.split_indices(s))) for s in SPLITS},
        "columns": ["speaker", "language", "label", "split"],
        "rows": [[str(s), str(l), int(y), str(sp)] for s, l, y, sp in
                 zip(corpus.speakers, corpus.languages, corpus.labels, corpus.splits)],
    }
    (path / "manifest").write_text(json.dumps(manifest, indent=1) + "\n")
    with open(path / "features", "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<II", len(corpus), corpus.dim))
        f.write(np.ascontiguousarray(corpus.features, dtype="<f8").tobytes())
    return path


def read_manifest(path) -> dict:
    mpath = Path(path) / "manifest"
    if not mpath.exists():
        raise FileNotFoundError(f"missing manifest: {mpath}")
    try:
        manifest = json.loads(mpath.read_text())
        for key in ("name", "labels", "dim", "count", "rows"):
            manifest[key]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CorpusFormatError(f"malformed manifest {mpath}: {exc}") from None
    return manifest


def load_corpus(path) -> Corpus:
    path = Path(path)
    manifest = read_manifest(path)
    fpath = path / "features"
    if not fpath.exists():
        raise FileNotFoundError(f"missing feature file: {fpath}")
    raw = fpath.read_bytes()
    head = len(FEATURE_MAGIC) + 8
    if len(raw) < head or not raw.startswith(FEATURE_MAGIC):
        raise CorpusFormatError(f"{fpath}: bad feature file header")
    count, dim = struct.unpack_from("<II", raw, len(FEATURE_MAGIC))
    if count != manifest["count"] or dim != manifest["dim"]:
        raise CorpusFormatError(
            f"{fpath}: header says {count}x{dim}, manifest says {manifest['count']}x{manifest['dim']}")
    expected = count * dim
    found = (len(raw) - head) // 8
    if found != expected or (len(raw) - head) % 8:
        raise CorpusFormatError(f"{fpath}: expected {expected} float64 values, found {found}")
    rows = manifest["rows"]
    if len(rows) != count:
        raise CorpusFormatError(f"{path}: manifest has {len(rows)} rows, expected {count}")
    n_labels = len(manifest["labels"])
    for i, row in enumerate(rows):
        if len(row) != 4:
            raise CorpusFormatError(f"{path}: manifest row {i} malformed: {row}")
        if not isinstance(row[2], int) or not 0 <= row[2] < n_labels:
            raise CorpusFormatError(f"{path}: row {i}: label out of range ({row[2]} for {n_labels} labels)")
    feats = np.frombuffer(raw, dtype="<f8", offset=head).reshape(count, dim)
    speakers, langs, labels, splits = zip(*rows) if rows else ((), (), (), ())
    return Corpus(manifest["name"], LabelSpace(tuple(manifest["labels"])), feats, labels, speakers, langs, splits)
