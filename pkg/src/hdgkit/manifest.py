"""Dataset manifest: domains, samples, and the known/unknown label partition."""

from __future__ import annotations

import json
from dataclasses import dataclass, field


class ManifestError(ValueError):
    """Manifest validation or parse failure with a machine-readable code."""

    def __init__(self, code: str, message: str, location: str = ""):
        self.code = code
        self.location = location
        super().__init__(f"{code}: {message}" + (f" (at {location})" if location else ""))


@dataclass(frozen=True)
class LabelSpace:
    known_classes: tuple[str, ...]
    unknown_classes: tuple[str, ...]

    def __post_init__(self):
        names = self.known_classes + self.unknown_classes
        if len(self.known_classes) < 2:
            raise ManifestError("too_few_known", "at least 2 known classes required")
        if len(set(names)) != len(names):
            raise ManifestError("duplicate_class", "class names must be unique across known+unknown")
        if any(not c for c in names):
            raise ManifestError("empty_class_name", "class names must be non-empty")

    @property
    def all_classes(self) -> tuple[str, ...]:
        return self.known_classes + self.unknown_classes

    @property
    def num_known(self) -> int:
        return len(self.known_classes)

    def known_index(self, name: str) -> int:
        return self.known_classes.index(name)


@dataclass(frozen=True)
class DomainSpec:
    name: str
    samples: tuple[tuple[str, str], ...]  # (sample_id, class_name)

    def __post_init__(self):
        if not self.samples:
            raise ManifestError("empty_domain", f"domain '{self.name}' has no samples", self.name)
        ids = [sid for sid, _ in self.samples]
        if len(set(ids)) != len(ids):
            dup = next(s for s in ids if ids.count(s) > 1)
            raise ManifestError("duplicate_sample", f"sample id '{dup}' repeated in domain '{self.name}'", self.name)


@dataclass(frozen=True)
class DatasetManifest:
    dataset_name: str
    domains: tuple[DomainSpec, ...]
    label_space: LabelSpace

    def __post_init__(self):
        if len(self.domains) < 2:
            raise ManifestError("too_few_domains", "at least 2 domains required")
        names = [d.name for d in self.domains]
        if len(set(names)) != len(names):
            raise ManifestError("duplicate_domain", "domain names must be unique")
        valid = set(self.label_space.all_classes)
        for d in self.domains:
            for sid, cls in d.samples:
                if cls not in valid:
                    raise ManifestError(
                        "unknown_class",
                        f"sample '{sid}' references class '{cls}' not in label space",
                        f"{d.name}/{sid}",
                    )

    def domain(self, name: str) -> DomainSpec:
        for d in self.domains:
            if d.name == name:
                return d
        raise KeyError(name)

    @property
    def domain_names(self) -> list[str]:
        return [d.name for d in self.domains]


def manifest_to_dict(m: DatasetManifest) -> dict:
    return {
        "dataset_name": m.dataset_name,
        "label_space": {
            "known": list(m.label_space.known_classes),
            "unknown": list(m.label_space.unknown_classes),
        },
        "domains": [
            {"name": d.name, "samples": [{"id": sid, "class": cls} for sid, cls in d.samples]}
            for d in m.domains
        ],
    }


def manifest_from_dict(doc: dict) -> DatasetManifest:
    try:
        ls = LabelSpace(
            known_classes=tuple(doc["label_space"]["known"]),
            unknown_classes=tuple(doc["label_space"].get("unknown", [])),
        )
        domains = tuple(
            DomainSpec(
                name=d["name"],
                samples=tuple((s["id"], s["class"]) for s in d["samples"]),
            )
            for d in doc["domains"]
        )
        return DatasetManifest(dataset_name=doc["dataset_name"], domains=domains, label_space=ls)
    except (KeyError, TypeError) as e:
        raise ManifestError("schema", f"missing or malformed field: {e}") from e


def load_manifest(path) -> DatasetManifest:
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except OSError as e:
        raise ManifestError("io", f"cannot read manifest: {e}", str(path)) from e
    except json.JSONDecodeError as e:
        raise ManifestError("parse", f"invalid JSON: {e}", f"{path}:{e.lineno}") from e
    return manifest_from_dict(doc)


def save_manifest(m: DatasetManifest, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest_to_dict(m), f, indent=2)
        f.write("\n")


@dataclass
class ValidationReport:
    missing_embeddings: list[str] = field(default_factory=list)
    orphan_rows: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.missing_embeddings and not self.orphan_rows


def validate_pairing(manifest: DatasetManifest, table) -> ValidationReport:
    """Cross-check manifest sample ids (or known classes, for text tables)
    against embedding-table keys."""
    from .hdge import EmbeddingKind

    if table.kind == EmbeddingKind.TEACHER_TEXT:
        expected = list(manifest.label_space.known_classes)
    else:
        expected = [sid for d in manifest.domains for sid, _ in d.samples]
    have = set(table.rows)
    exp = set(expected)
    return ValidationReport(
        missing_embeddings=sorted(exp - have),
        orphan_rows=sorted(have - exp),
    )
