"""Multi-domain bag-of-features corpora.

On-disk layout: one subdirectory per domain holding ``labeled.tsv``,
``unlabeled.tsv`` and optionally ``dev.tsv`` / ``test.tsv``. Each line is::

    label<TAB>feature:count feature:count ... [#gold:<k>]

``label`` is ``-1`` in unlabeled files; the optional trailing ``#gold:<k>``
carries a hidden true label used only for evaluation.
"""
from __future__ import annotations

import logging
from collections import Counter
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, DataError
from .nn_core import make_rng

log = logging.getLogger(__name__)

SPLIT_FILES = ("labeled", "unlabeled", "dev", "test")


@dataclass
class SparseExample:
    features: dict[str, int]
    label: int | None = None
    gold: int | None = None


@dataclass
class RawDomain:
    name: str
    labeled: list[SparseExample] = field(default_factory=list)
    unlabeled: list[SparseExample] = field(default_factory=list)
    dev: list[SparseExample] | None = None
    test: list[SparseExample] | None = None

    def all_examples(self) -> Iterable[SparseExample]:
        yield from self.labeled
        yield from self.unlabeled


def parse_line(line: str, where: str = "<line>") -> SparseExample:
    line = line.rstrip("\n").rstrip("\r")
    gold = None
    if "#gold:" in line:
        line, _, g = line.rpartition("#gold:")
        try:
            gold = int(g.strip())
        except ValueError:
            raise DataError(f"{where}: bad gold label {g.strip()!r}") from None
    label_s, tab, rest = line.partition("\t")
    if not tab:
        raise DataError(f"{where}: expected 'label<TAB>features'")
    try:
        label = int(label_s)
    except ValueError:
        raise DataError(f"{where}: bad label {label_s!r}") from None
    feats: dict[str, int] = {}
    for tok in rest.split():
        name, colon, count_s = tok.rpartition(":")
        if not colon or not name:
            raise DataError(f"{where}: bad feature token {tok!r}")
        try:
            count = int(count_s)
        except ValueError:
            raise DataError(f"{where}: bad count in {tok!r}") from None
        if count < 0:
            raise DataError(f"{where}: negative count in {tok!r}")
        if name in feats:
            log.warning("%s: duplicate feature %r, counts summed", where, name)
            feats[name] += count
        else:
            feats[name] = count
    return SparseExample(feats, None if label < 0 else label, gold)


def format_line(ex: SparseExample) -> str:
    label = -1 if ex.label is None else ex.label
    body = " ".join(f"{k}:{v}" for k, v in sorted(ex.features.items()))
    line = f"{label}\t{body}"
    if ex.gold is not None:
        line += f" #gold:{ex.gold}"
    return line


def read_split(path: Path) -> list[SparseExample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for i, line in enumerate(fh, 1):
            if not line.strip():
                continue
            out.append(parse_line(line, f"{path}:{i}"))
    return out


def load_corpus(directory) -> list[RawDomain]:
    """Load every domain subdirectory, ordered by domain name."""
    root = Path(directory)
    if not root.is_dir():
        raise DataError(f"corpus directory {root} not found")
    domains = []
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        if not (sub / "labeled.tsv").exists() and not (sub / "unlabeled.tsv").exists():
            continue
        d = RawDomain(sub.name)
        for split in SPLIT_FILES:
            path = sub / f"{split}.tsv"
            if path.exists():
                setattr(d, split, read_split(path))
        for ex in d.labeled:
            if ex.label is None:
                raise DataError(f"{sub}/labeled.tsv: unlabeled example in labeled split")
        domains.append(d)
    if not domains:
        raise DataError(f"no domain subdirectories in {root}")
    return domains


def write_corpus(domains: Sequence[RawDomain], directory) -> None:
    root = Path(directory)
    for d in domains:
        sub = root / d.name
        sub.mkdir(parents=True, exist_ok=True)
        for split in SPLIT_FILES:
            exs = getattr(d, split)
            if exs is None:
                continue
            with open(sub / f"{split}.tsv", "w", encoding="utf-8") as fh:
                for ex in exs:
                    fh.write(format_line(ex) + "\n")


# --- vocabulary & vectorization -------------------------------------------------

@dataclass
class Vocabulary:
    index: dict[str, int]
    frequency: dict[str, int]

    def __len__(self):
        return len(self.index)

    def features(self) -> list[str]:
        return sorted(self.index, key=self.index.__getitem__)


def build_vocab(domains: Sequence[RawDomain], n: int = 5000) -> Vocabulary:
    """Top-``n`` features by total count over labeled and unlabeled examples of
    all domains; ties broken lexicographically."""
    freq: Counter = Counter()
    for d in domains:
        for ex in d.all_examples():
            freq.update(ex.features)
    ranked = sorted(freq.items(), key=lambda kv: (-kv[1], kv[0]))
    if len(ranked) < n:
        log.warning("only %d distinct features (< %d requested)", len(ranked), n)
    chosen = ranked[:n]
    return Vocabulary({f: i for i, (f, _) in enumerate(chosen)}, dict(chosen))


def write_vocab(vocab: Vocabulary, path) -> None:
    """One ``feature<TAB>frequency`` line per entry, in index order."""
    with open(path, "w", encoding="utf-8") as fh:
        for f in vocab.features():
            fh.write(f"{f}\t{vocab.frequency[f]}\n")


def read_vocab(path) -> Vocabulary:
    index, freq = {}, {}
    with open(path, encoding="utf-8") as fh:
        for i, line in enumerate(fh, 1):
            name, tab, count = line.rstrip("\n").rpartition("\t")
            if not tab or name in index:
                raise DataError(f"{path}:{i}: malformed vocabulary line")
            index[name] = len(index)
            freq[name] = int(count)
    return Vocabulary(index, freq)


def vectorize(ex: SparseExample, vocab: Vocabulary) -> np.ndarray:
    """Dense raw-count vector; out-of-vocabulary features are dropped."""
    v = np.zeros(len(vocab))
    for f, c in ex.features.items():
        j = vocab.index.get(f)
        if j is not None:
            v[j] += c
    return v


def vectorize_many(examples: Sequence[SparseExample], vocab: Vocabulary) -> sp.csr_matrix:
    rows, cols, vals = [], [], []
    for i, ex in enumerate(examples):
        for f, c in ex.features.items():
            j = vocab.index.get(f)
            if j is not None and c:
                rows.append(i)
                cols.append(j)
                vals.append(float(c))
    m = sp.csr_matrix((vals, (rows, cols)), shape=(len(examples), len(vocab)))
    m.sum_duplicates()
    m.sort_indices()
    return m


def devectorize(v: np.ndarray, vocab: Vocabulary) -> dict[str, int]:
    names = vocab.features()
    return {names[j]: int(v[j]) for j in np.flatnonzero(v)}


# --- vectorized datasets --------------------------------------------------------

@dataclass
class LabeledSplit:
    x: object
    y: np.ndarray

    def __len__(self):
        return self.x.shape[0]


@dataclass
class UnlabeledSplit:
    """Inputs only. True labels, when known, live in ``DomainDataset`` behind
    :meth:`DomainDataset.hidden_gold` and never travel with the inputs."""

    x: object

    def __len__(self):
        return self.x.shape[0]


class DomainDataset:
    def __init__(self, name: str, labeled: LabeledSplit, unlabeled: UnlabeledSplit,
                 num_classes: int, dev: LabeledSplit | None = None,
                 test: LabeledSplit | None = None, gold: np.ndarray | None = None):
        self.name = name
        self.labeled = labeled
        self.unlabeled = unlabeled
        self.num_classes = num_classes
        self.dev = dev
        self.test = test
        self.__gold = None if gold is None else np.asarray(gold, dtype=np.int64)
        for split in (labeled, dev, test):
            if split is not None and len(split.y) and (split.y.min() < 0 or split.y.max() >= num_classes):
                raise DataError(f"{name}: labels outside [0, {num_classes})")

    def hidden_gold(self) -> np.ndarray | None:
        """True labels of the unlabeled pool (evaluation only)."""
        return self.__gold

    @property
    def input_dim(self) -> int:
        return self.labeled.x.shape[1]

    def without_labels(self) -> "DomainDataset":
        """Copy whose labeled split is empty (multi-source adaptation target)."""
        empty = LabeledSplit(self.labeled.x[:0], self.labeled.y[:0])
        return DomainDataset(self.name, empty, self.unlabeled, self.num_classes, self.dev,
                             self.test, self.__gold)

    def __repr__(self):
        return (f"DomainDataset({self.name!r}, labeled={len(self.labeled)}, "
                f"unlabeled={len(self.unlabeled)}, test={len(self.test) if self.test else 0})")


def _labels(exs: Sequence[SparseExample]) -> np.ndarray:
    return np.array([ex.label for ex in exs], dtype=np.int64)


def vectorize_corpus(domains: Sequence[RawDomain], vocab: Vocabulary,
                     num_classes: int | None = None) -> list[DomainDataset]:
    if num_classes is None:
        labels = [ex.label for d in domains for s in (d.labeled, d.dev or [], d.test or [])
                  for ex in s if ex.label is not None]
        num_classes = max(labels) + 1 if labels else 2
    out = []
    for d in domains:
        gold = None
        if d.unlabeled and all(ex.gold is not None for ex in d.unlabeled):
            gold = np.array([ex.gold for ex in d.unlabeled], dtype=np.int64)

        def lab(exs):
            if exs is None:
                return None
            for ex in exs:
                if ex.label is None:
                    raise DataError(f"{d.name}: evaluation split contains an unlabeled example")
            return LabeledSplit(vectorize_many(exs, vocab), _labels(exs))

        out.append(DomainDataset(d.name, lab(d.labeled), UnlabeledSplit(vectorize_many(d.unlabeled, vocab)),
                                 num_classes, lab(d.dev), lab(d.test), gold))
    return out


# --- synthetic generator --------------------------------------------------------

@dataclass
class SynthSpec:
    """Synthetic multi-domain corpus with disjoint feature blocks: a shared
    class block, one class block per domain, one nuisance block per domain,
    and pure-noise filler.

    ``shift_strength`` moves part of the domain signal into the shared block
    as a class-independent per-domain offset of size
    ``nuisance_strength * shift_strength``; with ``nuisance_strength = 0``
    nothing in the input identifies the domain.
    """

    preset: str = "custom"
    num_domains: int = 3
    num_classes: int = 2
    n_labeled: int = 500
    n_unlabeled: int = 1000
    n_test: int = 400
    n_dev: int = 0
    input_dim: int = 200
    block: int = 20
    shared_strength: float = 0.5
    specific_strength: float = 0.5
    nuisance_strength: float = 1.0
    shift_strength: float = 0.0
    noise: float = 1.0
    base_rate: float = 2.0
    seed: int = 0

    def validate(self) -> None:
        for name in ("shared_strength", "specific_strength", "nuisance_strength",
                     "shift_strength", "noise", "base_rate"):
            if getattr(self, name) < 0:
                raise ConfigError(f"synth {name} must be >= 0")
        if self.num_domains < 1 or self.num_classes < 2 or self.block < 1:
            raise ConfigError("synth needs >= 1 domain, >= 2 classes and block >= 1")
        need = max(self.block * (1 + 2 * self.num_domains), self.num_classes + self.num_domains)
        if self.input_dim < need:
            raise ConfigError(f"synth input_dim {self.input_dim} < {need} needed for the feature blocks")

    def to_string(self) -> str:
        return ",".join(f"{k}={v}" for k, v in asdict(self).items())

    @classmethod
    def from_string(cls, text: str) -> "SynthSpec":
        kv = {}
        for part in filter(None, (p.strip() for p in text.split(","))):
            k, eq, v = part.partition("=")
            if not eq:
                raise ConfigError(f"synth option {part!r} is not key=value")
            kv[k.strip()] = v.strip()
        base = PRESETS.get(kv.get("preset", "custom"))
        if base is None:
            raise ConfigError(f"unknown synth preset {kv.get('preset')!r}")
        types = {f.name: f.type for f in fields(cls)}
        changes = {}
        for k, v in kv.items():
            if k not in types:
                raise ConfigError(f"unknown synth option {k!r}")
            t = types[k]
            changes[k] = v if t == "str" else (int(v) if t == "int" else float(v))
        return replace(base, **changes)


PRESETS: dict[str, SynthSpec] = {
    "custom": SynthSpec(),
    "separable": SynthSpec(preset="separable", shared_strength=0.25, specific_strength=0.8,
                           shift_strength=1.0),
    "shifted": SynthSpec(preset="shifted", num_domains=4, shared_strength=0.25,
                         specific_strength=0.8, shift_strength=1.0),
}


@dataclass
class SynthTruth:
    """Generating directions, for oracle classifiers in tests."""

    class_shared: np.ndarray  # (K, B)
    class_specific: np.ndarray  # (M, K, B)
    nuisance: np.ndarray  # (M, B)
    shift: np.ndarray  # (M, B)
    spec: SynthSpec

    def block_slices(self):
        b, m = self.spec.block, self.spec.num_domains
        shared = slice(0, b)
        specific = [slice(b * (1 + i), b * (2 + i)) for i in range(m)]
        nuisance = [slice(b * (1 + m + i), b * (2 + m + i)) for i in range(m)]
        return shared, specific, nuisance

    def mean(self, domain: int, cls: int) -> np.ndarray:
        s = self.spec
        mu = np.full(s.input_dim, s.base_rate)
        sh, spc, nui = self.block_slices()
        mu[sh] += (s.shared_strength * self.class_shared[cls]
                   + s.nuisance_strength * s.shift_strength * self.shift[domain])
        mu[spc[domain]] += s.specific_strength * self.class_specific[domain, cls]
        mu[nui[domain]] += s.nuisance_strength * self.nuisance[domain]
        return mu


def _class_patterns(rng, k: int, b: int) -> np.ndarray:
    pats = rng.choice([-1.0, 1.0], size=(k, b))
    if k == 2:
        pats[1] = -pats[0]
    return pats


def synth_truth(spec: SynthSpec) -> SynthTruth:
    spec.validate()
    rng = make_rng(spec.seed, "synth.structure")
    m, k, b = spec.num_domains, spec.num_classes, spec.block
    return SynthTruth(
        class_shared=_class_patterns(rng, k, b),
        class_specific=np.stack([_class_patterns(rng, k, b) for _ in range(m)]),
        nuisance=rng.uniform(0.5, 1.5, size=(m, b)),
        shift=rng.choice([-1.0, 1.0], size=(m, b)),
        spec=spec,
    )


def _draw(truth: SynthTruth, rng, domain: int, n: int):
    s = truth.spec
    y = rng.integers(0, s.num_classes, size=n)
    means = np.stack([truth.mean(domain, c) for c in range(s.num_classes)])
    z = means[y] + s.noise * rng.standard_normal((n, s.input_dim))
    return np.maximum(np.rint(z), 0.0), y


def synth_generate(spec: SynthSpec) -> list[DomainDataset]:
    """Bit-reproducible synthetic datasets with hidden gold labels on the
    unlabeled pools."""
    truth = synth_truth(spec)
    out = []
    for i in range(spec.num_domains):
        rng = make_rng(spec.seed, f"synth.domain{i}")
        xl, yl = _draw(truth, rng, i, spec.n_labeled)
        xu, yu = _draw(truth, rng, i, spec.n_unlabeled)
        xt, yt = _draw(truth, rng, i, spec.n_test)
        dev = None
        if spec.n_dev:
            xd, yd = _draw(truth, rng, i, spec.n_dev)
            dev = LabeledSplit(xd, yd)
        out.append(DomainDataset(f"d{i}", LabeledSplit(xl, yl), UnlabeledSplit(xu), spec.num_classes,
                                 dev=dev, test=LabeledSplit(xt, yt), gold=yu))
    return out


def to_raw(datasets: Sequence[DomainDataset]) -> list[RawDomain]:
    """Convert dense datasets to the on-disk example form (feature names ``f<j>``)."""

    def exs(x, y=None, gold=None):
        x = x.toarray() if sp.issparse(x) else x
        out = []
        for i in range(x.shape[0]):
            feats = {f"f{j}": int(x[i, j]) for j in np.flatnonzero(x[i])}
            out.append(SparseExample(feats, None if y is None else int(y[i]),
                                     None if gold is None else int(gold[i])))
        return out

    raws = []
    for d in datasets:
        raws.append(RawDomain(
            d.name,
            exs(d.labeled.x, d.labeled.y),
            exs(d.unlabeled.x, gold=d.hidden_gold()),
            exs(d.dev.x, d.dev.y) if d.dev is not None else None,
            exs(d.test.x, d.test.y) if d.test is not None else None,
        ))
    return raws


def sample_distance_mixture(n: int, pi: float, std: float, delta: float,
                            rng: np.random.Generator, num_classes: int = 1):
    """Distances from a half-normal(0, std) / uniform(0, delta) mixture.

    Returns ``(class_ids, d, inlier)``; classes are assigned round-robin and
    share the same mixture.
    """
    if not 0.0 <= pi <= 1.0 or std <= 0 or delta <= 0:
        raise ConfigError("mixture needs pi in [0, 1], std > 0 and delta > 0")
    inlier = rng.random(n) < pi
    d = np.where(inlier, np.abs(rng.normal(0.0, std, n)), rng.uniform(0.0, delta, n))
    return np.arange(n) % num_classes, d, inlier
