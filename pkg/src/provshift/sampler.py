"""Split construction with controlled label-provenance correlation.

Subjects are first partitioned into train/val/test pools (default 6:2:2),
then each split is drawn from its pool by greedy maximal subsampling:
pick the largest N such that every (y, z) cell quota N*p[y][z] is
available, then sample the quotas without replacement. Test suites sweep
a list of target log-alpha values, each sampled independently from the
test pool.
"""

from dataclasses import dataclass, field
import math

import numpy as np

from .datamodel import Dataset, Example, JointTable, empirical_joint
from .rng import rng_from
from .errors import (
    CellStarvedError,
    InfeasibleJointError,
    SubjectConflictError,
)

UNIFORM = (0.5, 0.5)


@dataclass(frozen=True)
class SplitSpec:
    log_alpha_train: float
    log_alpha_val: float
    sweep: tuple
    marginal_y: tuple = UNIFORM
    marginal_z: tuple = UNIFORM
    ratios: tuple = (6.0, 2.0, 2.0)
    seed: int = 0

    def __post_init__(self):
        if not self.sweep:
            raise ValueError("sweep must be nonempty")
        if any(r <= 0 for r in self.ratios) or len(self.ratios) != 3:
            raise ValueError("ratios must be three positive reals")
        for m in (self.marginal_y, self.marginal_z):
            if abs(sum(m) - 1.0) > 1e-9 or any(v <= 0 for v in m):
                raise ValueError("marginals must be positive and sum to 1")
        object.__setattr__(self, "sweep", tuple(self.sweep))
        object.__setattr__(self, "ratios", tuple(self.ratios))
        object.__setattr__(self, "marginal_y", tuple(self.marginal_y))
        object.__setattr__(self, "marginal_z", tuple(self.marginal_z))


@dataclass
class SplitResult:
    train: Dataset
    val: Dataset
    tests: list  # list of (log_alpha_target, Dataset)
    achieved: dict  # split name -> JointTable
    report: dict


def solve_joint(log_alpha, marginal_y=UNIFORM, marginal_z=UNIFORM):
    """Joint table with the requested marginals and log-alpha.

    With c_z = P(Y=1|Z=z) and r = 10^log_alpha, the constraints
    c1 = r*c0 and sum_z c_z P(Z=z) = P(Y=1) give the closed form
    c0 = P(Y=1) / (P(Z=0) + r*P(Z=1)).
    """
    if abs(log_alpha) >= 6:
        raise InfeasibleJointError(f"|log alpha| must be < 6, got {log_alpha}")
    my1 = marginal_y[1]
    mz0, mz1 = marginal_z
    r = 10.0 ** log_alpha
    c0 = my1 / (mz0 + r * mz1)
    c1 = r * c0
    if not (0.0 < c0 < 1.0 and 0.0 < c1 < 1.0):
        raise InfeasibleJointError(
            f"infeasible-joint: no table with log alpha {log_alpha} and the "
            f"requested marginals (conditionals {c0:.4f}, {c1:.4f})"
        )
    p = np.array([
        [(1.0 - c0) * mz0, (1.0 - c1) * mz1],
        [c0 * mz0, c1 * mz1],
    ])
    return JointTable(p)


def max_feasible_size(available_counts, target):
    """Largest N with N * target.p[y][z] <= count[y][z] for every cell."""
    counts = np.asarray(available_counts)
    best = math.inf
    for y in (0, 1):
        for z in (0, 1):
            p = target.p[y, z]
            if p <= 0.0:
                continue
            if counts[y, z] == 0:
                raise CellStarvedError(y, z)
            best = min(best, counts[y, z] / p)
    if not math.isfinite(best):
        return 0
    return int(math.floor(best))


def _cell_quotas(n, target, counts):
    """Integer per-cell quotas summing to n, round-half-even with the
    remainder repaired on the largest cell that still has slack."""
    raw = {}
    for y in (0, 1):
        for z in (0, 1):
            raw[(y, z)] = n * target.p[y, z]
    quotas = {k: int(np.round(v)) for k, v in raw.items()}
    diff = n - sum(quotas.values())
    order = sorted(raw, key=lambda k: raw[k], reverse=True)
    i = 0
    while diff != 0 and i < 8:
        k = order[i % 4]
        step = 1 if diff > 0 else -1
        y, z = k
        if 0 <= quotas[k] + step <= counts[y, z]:
            quotas[k] += step
            diff -= step
        i += 1
    return quotas


def _sample_split(dataset, pool_indices, target, rng, name):
    cells = {k: [] for k in ((0, 0), (0, 1), (1, 0), (1, 1))}
    for i in pool_indices:
        ex = dataset.examples[i]
        cells[(ex.label, ex.provenance)].append(i)
    counts = np.zeros((2, 2), dtype=np.int64)
    for (y, z), idx in cells.items():
        counts[y, z] = len(idx)
    n = max_feasible_size(counts, target)
    quotas = _cell_quotas(n, target, counts)
    # largest quota first; per-cell draws are independent so order only
    # fixes the RNG consumption sequence
    chosen = []
    for key in sorted(quotas, key=lambda k: (-quotas[k], k)):
        members = np.array(sorted(cells[key]), dtype=np.int64)
        take = quotas[key]
        if take > 0:
            picked = rng.choice(members, size=take, replace=False)
            chosen.extend(int(v) for v in picked)
    chosen.sort()
    return dataset.subset(chosen, name=name)


def _partition_subjects(subjects, ratios, rng):
    """Shuffle subjects, then cut into three pools with largest-remainder
    apportionment of the ratio weights."""
    subjects = sorted(subjects)
    rng.shuffle(subjects)
    total = sum(ratios)
    n = len(subjects)
    raw = [n * r / total for r in ratios]
    sizes = [int(math.floor(v)) for v in raw]
    rem = n - sum(sizes)
    order = sorted(range(3), key=lambda i: raw[i] - sizes[i], reverse=True)
    for i in range(rem):
        sizes[order[i]] += 1
    pools = []
    start = 0
    for s in sizes:
        pools.append(set(subjects[start:start + s]))
        start += s
    return pools


def make_splits(dataset, spec):
    """Build train/val and one test split per sweep target.

    Deterministic in (dataset, spec); subjects never cross pools, so no
    subject id appears in more than one of train, val, or any test split.
    """
    for ex in dataset.examples:
        if ex.subject_id == "":
            raise SubjectConflictError(
                f"subject-conflict: example {ex.example_id!r} has empty subject_id"
            )
    ss = np.random.SeedSequence(spec.seed)
    children = ss.spawn(3 + len(spec.sweep))
    part_rng = np.random.default_rng(children[0])

    subjects = sorted({ex.subject_id for ex in dataset.examples})
    train_subj, val_subj, test_subj = _partition_subjects(subjects, spec.ratios, part_rng)

    pool_idx = {"train": [], "val": [], "test": []}
    for i, ex in enumerate(dataset.examples):
        if ex.subject_id in train_subj:
            pool_idx["train"].append(i)
        elif ex.subject_id in val_subj:
            pool_idx["val"].append(i)
        else:
            pool_idx["test"].append(i)

    achieved = {}
    report = {"log_alpha_base": 10, "targets": {}, "sizes": {}, "deltas": {}}

    def build(pool, target_la, rng_seed, name):
        target = solve_joint(target_la, spec.marginal_y, spec.marginal_z)
        rng = np.random.default_rng(rng_seed)
        split = _sample_split(dataset, pool_idx[pool], target, rng, name)
        jt = empirical_joint(split) if len(split) else None
        achieved[name] = jt
        report["targets"][name] = target_la
        report["sizes"][name] = len(split)
        report["deltas"][name] = (
            jt.log_alpha - target_la if jt is not None else math.nan
        )
        return split

    train = build("train", spec.log_alpha_train, children[1], "train")
    val = build("val", spec.log_alpha_val, children[2], "val")
    tests = []
    for j, la in enumerate(spec.sweep):
        split = build("test", la, children[3 + j], f"test@{la:g}")
        tests.append((la, split))
    return SplitResult(train, val, tests, achieved, report)


def sweep_from_pool(dataset, sweep, seed, marginal_y=UNIFORM, marginal_z=UNIFORM):
    """Sample one split per sweep target from the whole dataset.

    Used for stress-testing an already trained model, where no train/val
    pools are needed; each target draws independently.
    """
    children = np.random.SeedSequence(seed).spawn(len(sweep))
    pool = list(range(len(dataset.examples)))
    out = []
    for j, la in enumerate(sweep):
        target = solve_joint(la, marginal_y, marginal_z)
        rng = np.random.default_rng(children[j])
        out.append((la, _sample_split(dataset, pool, target, rng, f"sweep@{la:g}")))
    return out


def sweep_specs(lo, hi, steps):
    """Arithmetic progression from lo to hi inclusive."""
    if steps < 2:
        raise ValueError("steps must be >= 2")
    if not lo < hi:
        raise ValueError("lo must be < hi")
    return [float(v) for v in np.linspace(lo, hi, steps)]


def rebalance(dataset, mode, seed):
    """Equalize the four (y, z) cell counts.

    mode="down" truncates every cell to the minimum count (without
    replacement); mode="up" resamples every cell with replacement to the
    maximum count. Either way the result has log alpha exactly 0.
    """
    if mode not in ("up", "down"):
        raise ValueError(f"mode must be 'up' or 'down', got {mode!r}")
    cells = dataset.cell_indices()
    for (y, z), idx in cells.items():
        if not idx:
            raise CellStarvedError(y, z)
    sizes = [len(v) for v in cells.values()]
    rng = rng_from(seed)
    out = []
    if mode == "down":
        m = min(sizes)
        for key in sorted(cells):
            members = np.array(cells[key], dtype=np.int64)
            picked = rng.choice(members, size=m, replace=False)
            out.extend(dataset.examples[int(i)] for i in sorted(picked))
        return Dataset(out, dataset.dim, dataset.name)
    m = max(sizes)
    dup = {}
    for key in sorted(cells):
        members = np.array(cells[key], dtype=np.int64)
        picked = np.concatenate([members, rng.choice(members, size=m - len(members), replace=True)]) \
            if m > len(members) else members
        for i in sorted(int(v) for v in picked[:len(members)]):
            out.append(dataset.examples[i])
        for i in (int(v) for v in picked[len(members):]):
            ex = dataset.examples[i]
            k = dup.get(ex.example_id, 0) + 1
            dup[ex.example_id] = k
            # duplicates need fresh ids to keep example_id unique
            out.append(Example(ex.features, ex.label, ex.provenance,
                               ex.subject_id, f"{ex.example_id}#dup{k}"))
    return Dataset(out, dataset.dim, dataset.name)
