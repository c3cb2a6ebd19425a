"""Core value types, the annotated-dataset file format, and empirical
distribution computations shared by all other modules.

A dataset holds labeled examples (x, y, z) where y is a binary label and
z a binary provenance tag. The 2x2 joint over (Y, Z) summarizes the
label-provenance correlation; its strength is the base-10 log ratio

    log_alpha = log10 P(Y=1|Z=1) - log10 P(Y=1|Z=0)

which is 0 when Y and Z are independent and undefined (NaN sentinel)
when either conditional is degenerate.
"""

from dataclasses import dataclass, field
import math

import numpy as np

from .errors import (
    DatasetParseError,
    EmptyDatasetError,
    UndefinedAlphaError,
)

GROUP_KEYS = ((0, 0), (0, 1), (1, 0), (1, 1))


@dataclass(frozen=True)
class Example:
    """One labeled instance: feature vector, binary label, binary
    provenance, subject id, and a dataset-unique example id."""

    features: np.ndarray
    label: int
    provenance: int
    subject_id: str
    example_id: str

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label!r}")
        if self.provenance not in (0, 1):
            raise ValueError(f"provenance must be 0 or 1, got {self.provenance!r}")


class Dataset:
    """Ordered collection of examples sharing a feature dimension.

    Immutable after construction; the matrix/vector views are cached so
    repeated evaluation passes do not re-stack features.
    """

    def __init__(self, examples, dim, name=""):
        examples = list(examples)
        for ex in examples:
            if len(ex.features) != dim:
                raise ValueError(
                    f"example {ex.example_id!r} has {len(ex.features)} features, "
                    f"dataset dim is {dim}"
                )
        seen = set()
        for ex in examples:
            if ex.example_id in seen:
                raise ValueError(f"duplicate example_id {ex.example_id!r}")
            seen.add(ex.example_id)
        self.examples = tuple(examples)
        self.dim = dim
        self.name = name
        self._X = None
        self._y = None
        self._z = None

    def __len__(self):
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)

    @property
    def X(self):
        if self._X is None:
            if self.examples:
                self._X = np.stack([ex.features for ex in self.examples]).astype(np.float64)
            else:
                self._X = np.zeros((0, self.dim))
        return self._X

    @property
    def y(self):
        if self._y is None:
            self._y = np.array([ex.label for ex in self.examples], dtype=np.int64)
        return self._y

    @property
    def z(self):
        if self._z is None:
            self._z = np.array([ex.provenance for ex in self.examples], dtype=np.int64)
        return self._z

    def subject_ids(self):
        return [ex.subject_id for ex in self.examples]

    def subset(self, indices, name=None):
        exs = [self.examples[i] for i in indices]
        return Dataset(exs, self.dim, name if name is not None else self.name)

    def cell_indices(self):
        """Indices of examples per (y, z) cell."""
        cells = {key: [] for key in GROUP_KEYS}
        for i, ex in enumerate(self.examples):
            cells[(ex.label, ex.provenance)].append(i)
        return cells

    def cell_counts(self):
        counts = np.zeros((2, 2), dtype=np.int64)
        for ex in self.examples:
            counts[ex.label, ex.provenance] += 1
        return counts


@dataclass(frozen=True)
class JointTable:
    """A 2x2 probability table over (Y, Z) with derived marginals and
    the base-10 log correlation ratio (NaN when a conditional is 0/1)."""

    p: np.ndarray
    marginal_y: np.ndarray = field(init=False)
    marginal_z: np.ndarray = field(init=False)
    log_alpha: float = field(init=False)

    def __post_init__(self):
        p = np.asarray(self.p, dtype=np.float64)
        if p.shape != (2, 2):
            raise ValueError(f"joint table must be 2x2, got shape {p.shape}")
        if np.any(p < 0):
            raise ValueError("joint table entries must be nonnegative")
        total = p.sum()
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"joint table entries sum to {total}, expected 1")
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "marginal_y", p.sum(axis=1))
        object.__setattr__(self, "marginal_z", p.sum(axis=0))
        object.__setattr__(self, "log_alpha", _log_alpha(p))

    def conditional_y1(self, z):
        """P(Y=1 | Z=z); NaN when P(Z=z) = 0."""
        pz = self.p[0, z] + self.p[1, z]
        if pz == 0.0:
            return math.nan
        return self.p[1, z] / pz


def _log_alpha(p):
    out = math.nan
    c = []
    for z in (0, 1):
        pz = p[0, z] + p[1, z]
        if pz == 0.0:
            return out
        c.append(p[1, z] / pz)
    if 0.0 < c[0] < 1.0 and 0.0 < c[1] < 1.0:
        out = math.log10(c[1]) - math.log10(c[0])
    return out


def empirical_joint(dataset):
    """Empirical 2x2 joint over (label, provenance)."""
    if len(dataset) == 0:
        raise EmptyDatasetError("empty-dataset: cannot compute statistics")
    counts = dataset.cell_counts().astype(np.float64)
    return JointTable(counts / counts.sum())


def log_alpha_of(joint):
    """log10 P(Y=1|Z=1) - log10 P(Y=1|Z=0); raises when degenerate.

    Batch statistics paths should read joint.log_alpha instead, which
    carries the NaN sentinel without raising.
    """
    la = joint.log_alpha
    if math.isnan(la):
        raise UndefinedAlphaError(
            "undefined-alpha: a conditional P(Y=1|Z=z) is 0 or 1"
        )
    return la


def save_dataset(dataset, path):
    """Write the line-oriented annotated-dataset format.

    Header `#dim=<d>`; one example per line:
    example_id<TAB>subject_id<TAB>y<TAB>z<TAB>f1,f2,...,fd
    with reals in shortest round-trip decimal. UTF-8, LF newlines.
    """
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"#dim={dataset.dim}\n")
        for ex in dataset.examples:
            feats = ",".join(repr(float(v)) for v in ex.features)
            fh.write(
                f"{ex.example_id}\t{ex.subject_id}\t{ex.label}\t{ex.provenance}\t{feats}\n"
            )


def load_dataset(path, name=None):
    """Parse the annotated-dataset format; errors carry line numbers."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines or not lines[0].startswith("#dim="):
        raise DatasetParseError(1, "missing '#dim=<d>' header")
    try:
        dim = int(lines[0][len("#dim="):])
    except ValueError:
        raise DatasetParseError(1, f"bad dimension {lines[0][len('#dim='):]!r}")
    if dim <= 0:
        raise DatasetParseError(1, f"dimension must be positive, got {dim}")

    examples = []
    seen_ids = set()
    for line_no, line in enumerate(lines[1:], start=2):
        if not line:
            raise DatasetParseError(line_no, "blank line")
        parts = line.split("\t")
        if len(parts) != 5:
            raise DatasetParseError(line_no, f"expected 5 tab-separated fields, got {len(parts)}")
        example_id, subject_id, y_s, z_s, feats_s = parts
        if example_id in seen_ids:
            raise DatasetParseError(line_no, f"duplicate example_id {example_id!r}")
        seen_ids.add(example_id)
        if y_s not in ("0", "1"):
            raise DatasetParseError(line_no, f"label must be 0 or 1, got {y_s!r}")
        if z_s not in ("0", "1"):
            raise DatasetParseError(line_no, f"provenance must be 0 or 1, got {z_s!r}")
        values = feats_s.split(",") if feats_s else []
        if len(values) != dim:
            raise DatasetParseError(
                line_no, f"expected {dim} feature values, got {len(values)}"
            )
        try:
            feats = np.array([float(v) for v in values], dtype=np.float64)
        except ValueError:
            raise DatasetParseError(line_no, "unparseable feature value")
        examples.append(Example(feats, int(y_s), int(z_s), subject_id, example_id))

    ds_name = name if name is not None else str(path)
    return Dataset(examples, dim, ds_name)
