"""Desk-scale synthetic data: manifests plus teacher/student/text
embeddings with controllable domain shift and teacher quality."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm

from .hdge import EmbeddingKind, EmbeddingTable
from .manifest import DatasetManifest, DomainSpec, LabelSpace


class SynthError(ValueError):
    def __init__(self, code: str, message: str):
        self.code = code
        super().__init__(f"{code}: {message}")


@dataclass(frozen=True)
class SynthConfig:
    num_known: int = 12
    num_unknown: int = 4
    num_domains: int = 4
    samples_per_class_per_domain: int = 20
    dim: int = 32
    domain_shift: float = 0.3
    noise_sigma: float = 0.15
    teacher_fidelity: float = 0.9
    seed: int = 42

    def __post_init__(self):
        if self.num_known < 2:
            raise SynthError("bad_config", "need at least 2 known classes")
        if self.num_domains < 3:
            raise SynthError("bad_config", "need at least 3 domains")
        if self.dim < 4:
            raise SynthError("bad_config", "dim must be >= 4")
        if not 0 <= self.teacher_fidelity <= 1:
            raise SynthError("bad_config", "teacher_fidelity must be in [0, 1]")
        if self.domain_shift < 0 or self.noise_sigma < 0:
            raise SynthError("bad_config", "shift and noise must be non-negative")


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _random_rotation(rng: np.random.Generator, dim: int, angle: float) -> np.ndarray:
    """Rotation exp(angle * K) for a random unit-scaled skew-symmetric K;
    norm-preserving so cosine geometry survives the shift."""
    a = rng.standard_normal((dim, dim))
    k = a - a.T
    k /= np.linalg.norm(k, 2)
    return expm(angle * k)


def generate(cfg: SynthConfig):
    """Returns (manifest, student features, teacher image embeddings,
    teacher text embeddings), all deterministic in cfg.seed."""
    rng = np.random.default_rng(cfg.seed)
    total = cfg.num_known + cfg.num_unknown
    classes = [f"class{i:02d}" for i in range(total)]
    prototypes = np.stack([_unit(rng.standard_normal(cfg.dim)) for _ in range(total)])

    rotations = [
        _random_rotation(rng, cfg.dim, cfg.domain_shift * rng.uniform(0.5, 1.0))
        for _ in range(cfg.num_domains)
    ]

    label_space = LabelSpace(
        known_classes=tuple(classes[: cfg.num_known]),
        unknown_classes=tuple(classes[cfg.num_known :]),
    )
    student = EmbeddingTable(dim=cfg.dim, kind=EmbeddingKind.STUDENT_FEATURE)
    teacher_img = EmbeddingTable(dim=cfg.dim, kind=EmbeddingKind.TEACHER_IMAGE)

    domains = []
    for d in range(cfg.num_domains):
        name = f"domain{d}"
        samples = []
        for c, cls in enumerate(classes):
            for k in range(cfg.samples_per_class_per_domain):
                sid = f"{name}_{cls}_{k:03d}"
                base = prototypes[c] + cfg.noise_sigma * rng.standard_normal(cfg.dim)
                wobble = cfg.noise_sigma * 0.5 * rng.standard_normal(cfg.dim)
                teacher_img.put(sid, _unit(rotations[d] @ base))
                student.put(sid, _unit(rotations[d] @ (base + wobble)))
                samples.append((sid, cls))
        domains.append(DomainSpec(name=name, samples=tuple(samples)))

    texts = EmbeddingTable(dim=cfg.dim, kind=EmbeddingKind.TEACHER_TEXT)
    for c in range(cfg.num_known):
        drift = _unit(rng.standard_normal(cfg.dim))
        texts.put(
            classes[c],
            _unit(cfg.teacher_fidelity * prototypes[c] + (1 - cfg.teacher_fidelity) * drift),
        )

    manifest = DatasetManifest(
        dataset_name=f"synthetic-{cfg.num_known}k{cfg.num_unknown}u-seed{cfg.seed}",
        domains=tuple(domains),
        label_space=label_space,
    )
    return manifest, student, teacher_img, texts
