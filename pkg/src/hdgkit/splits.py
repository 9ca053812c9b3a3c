"""Hybridness computation and exact-target split construction.

A split at target hybridness k/N is built as a shared pool of k classes
plus a round-robin distribution of the remaining N-k classes, so every
pairwise intersection equals the pool and the hybridness is exactly k/N.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from fractions import Fraction
from itertools import combinations

from .manifest import DatasetManifest, LabelSpace
from .rng import Xoshiro256StarStar, mix_seed


class SplitError(ValueError):
    def __init__(self, code: str, message: str):
        self.code = code
        super().__init__(f"{code}: {message}")


@dataclass(frozen=True)
class SplitPlan:
    source_domains: tuple[str, ...]
    source_label_sets: tuple[tuple[str, ...], ...]  # parallel to source_domains
    target_domain: str
    hybridness_target: Fraction
    seed: int

    def label_set(self, domain: str) -> tuple[str, ...]:
        return self.source_label_sets[self.source_domains.index(domain)]


@dataclass(frozen=True)
class EvalTask:
    split: SplitPlan
    train_samples: dict[str, list[tuple[str, str]]]  # domain -> [(id, class)]
    val_samples: dict[str, list[tuple[str, str]]]
    test_samples: list[tuple[str, str]]


def hybridness(split: SplitPlan, num_known: int) -> Fraction:
    """Mean pairwise label-set intersection size over source-domain pairs,
    normalized by the known-class count. Exact rational."""
    m = len(split.source_label_sets)
    if m < 2:
        raise SplitError("too_few_sources", f"need at least 2 source domains, got {m}")
    if num_known < 1:
        raise SplitError("bad_n", "known-class count must be positive")
    sets = [set(s) for s in split.source_label_sets]
    total = sum(len(a & b) for a, b in combinations(sets, 2))
    pairs = m * (m - 1) // 2
    return Fraction(total, num_known * pairs)


def build_splits(
    label_space: LabelSpace,
    source_domains: list[str],
    targets: list[Fraction],
    pool_seed: int,
    target_domain: str = "",
) -> list[SplitPlan]:
    """One SplitPlan per requested hybridness target; each achieves its
    target exactly or is rejected."""
    m = len(source_domains)
    if m < 2:
        raise SplitError("too_few_sources", f"need at least 2 source domains, got {m}")
    n = label_space.num_known
    plans = []
    for t in targets:
        t = Fraction(t)
        if not 0 <= t <= 1:
            raise SplitError("bad_target", f"hybridness target {t} outside [0, 1]")
        if t == 1:
            sets = tuple(label_space.known_classes for _ in range(m))
            plans.append(SplitPlan(tuple(source_domains), sets, target_domain, t, pool_seed))
            continue
        k = t * n
        if k.denominator != 1:
            raise SplitError(
                "non_integral_pool",
                f"target {t} with N={n} gives non-integral pool size {k}",
            )
        k = int(k)
        if t == 0 and n < m:
            raise SplitError(
                "infeasible_disjoint",
                f"cannot cover {n} classes disjointly across {m} non-empty source sets",
            )
        order = list(label_space.known_classes)
        rng = Xoshiro256StarStar(mix_seed(pool_seed, t.numerator, t.denominator))
        rng.shuffle(order)
        pool = order[:k]
        rank = {c: i for i, c in enumerate(label_space.known_classes)}
        sets = tuple(
            tuple(sorted(pool + order[k + i :: m], key=rank.__getitem__))
            for i in range(m)
        )
        plans.append(SplitPlan(tuple(source_domains), sets, target_domain, t, pool_seed))
    return plans


def leave_one_domain_out(
    manifest: DatasetManifest,
    targets: list[Fraction],
    val_fraction: float = 0.1,
    seed: int = 0,
) -> list[EvalTask]:
    """Each domain in turn is the target; sources get label sets per target
    hybridness, with a per-class seeded validation holdout."""
    if len(manifest.domains) < 3:
        raise SplitError("too_few_domains", "leave-one-domain-out needs at least 3 domains")
    if not 0 < val_fraction < 1:
        raise SplitError("bad_val_fraction", f"val_fraction must be in (0,1), got {val_fraction}")
    tasks = []
    for d_idx, target in enumerate(manifest.domains):
        sources = [d.name for d in manifest.domains if d.name != target.name]
        plans = build_splits(
            manifest.label_space,
            sources,
            targets,
            pool_seed=mix_seed(seed, d_idx),
            target_domain=target.name,
        )
        for plan in plans:
            train: dict[str, list[tuple[str, str]]] = {}
            val: dict[str, list[tuple[str, str]]] = {}
            for s_idx, dom_name in enumerate(sources):
                dom = manifest.domain(dom_name)
                allowed = set(plan.label_set(dom_name))
                by_class: dict[str, list[tuple[str, str]]] = {}
                for sid, cls in dom.samples:
                    if cls in allowed:
                        by_class.setdefault(cls, []).append((sid, cls))
                tr, va = [], []
                for c_idx, cls in enumerate(manifest.label_space.known_classes):
                    group = by_class.get(cls)
                    if not group:
                        continue
                    idx = list(range(len(group)))
                    rng = Xoshiro256StarStar(mix_seed(seed, d_idx, s_idx, c_idx))
                    rng.shuffle(idx)
                    n_val = 0
                    if len(group) >= 2:
                        n_val = min(max(1, int(val_fraction * len(group))), len(group) - 1)
                    va.extend(group[i] for i in idx[:n_val])
                    tr.extend(group[i] for i in idx[n_val:])
                train[dom_name] = tr
                val[dom_name] = va
            tasks.append(
                EvalTask(
                    split=plan,
                    train_samples=train,
                    val_samples=val,
                    test_samples=list(target.samples),
                )
            )
    return tasks


def plan_to_dict(plan: SplitPlan, num_known: int) -> dict:
    h = hybridness(plan, num_known) if len(plan.source_label_sets) >= 2 else plan.hybridness_target
    return {
        "target_domain": plan.target_domain,
        "hybridness": f"{h.numerator}/{h.denominator}",
        "seed": plan.seed,
        "source_label_sets": {
            d: list(s) for d, s in zip(plan.source_domains, plan.source_label_sets)
        },
    }


def task_to_dict(task: EvalTask, num_known: int) -> dict:
    return {
        "plan": plan_to_dict(task.split, num_known),
        "hybridness_target": str(task.split.hybridness_target),
        "train": {d: [list(s) for s in v] for d, v in task.train_samples.items()},
        "val": {d: [list(s) for s in v] for d, v in task.val_samples.items()},
        "test": [list(s) for s in task.test_samples],
    }


def task_from_dict(doc: dict) -> EvalTask:
    pd = doc["plan"]
    domains = tuple(pd["source_label_sets"])
    plan = SplitPlan(
        source_domains=domains,
        source_label_sets=tuple(tuple(pd["source_label_sets"][d]) for d in domains),
        target_domain=pd["target_domain"],
        hybridness_target=Fraction(doc["hybridness_target"]),
        seed=pd["seed"],
    )
    return EvalTask(
        split=plan,
        train_samples={d: [tuple(s) for s in v] for d, v in doc["train"].items()},
        val_samples={d: [tuple(s) for s in v] for d, v in doc["val"].items()},
        test_samples=[tuple(s) for s in doc["test"]],
    )


def save_task(task: EvalTask, num_known: int, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(task_to_dict(task, num_known), f, indent=1)
        f.write("\n")


def load_task(path) -> EvalTask:
    with open(path, "r", encoding="utf-8") as f:
        return task_from_dict(json.load(f))
