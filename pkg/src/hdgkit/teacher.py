"""Teacher similarity scores: cosine similarities against class text
embeddings, temperature softmax, zero-shot prediction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .hdge import EmbeddingKind, EmbeddingTable, load_container, save_embeddings

NORM_EPS = 1e-12


class TeacherError(ValueError):
    def __init__(self, code: str, message: str):
        self.code = code
        super().__init__(f"{code}: {message}")


def softmax_with_temperature(v, temp: float) -> np.ndarray:
    """Stabilized softmax of v / temp."""
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise TeacherError("non_finite", "softmax input contains a non-finite value")
    if temp <= 0:
        raise TeacherError("bad_temperature", f"temperature must be positive, got {temp}")
    z = v / temp
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cosine_scores(image_row, text_table: EmbeddingTable) -> np.ndarray:
    """Cosine similarity of one image embedding against every class text
    embedding, in table key order."""
    img = np.asarray(image_row, dtype=np.float64)
    if img.shape != (text_table.dim,):
        raise TeacherError(
            "dim_mismatch", f"image dim {img.shape} vs text dim {text_table.dim}"
        )
    n_img = np.linalg.norm(img)
    if n_img < NORM_EPS:
        raise TeacherError("zero_norm", "image embedding has near-zero norm")
    texts = text_table.matrix()
    norms = np.linalg.norm(texts, axis=1)
    if np.any(norms < NORM_EPS):
        bad = text_table.keys()[int(np.argmin(norms))]
        raise TeacherError("zero_norm", f"text embedding '{bad}' has near-zero norm")
    return (texts @ img) / (norms * n_img)


@dataclass
class TeacherScores:
    class_order: list[str]
    sample_ids: list[str]
    raw_similarities: np.ndarray | None  # (S, N), None when loaded from cache
    probabilities: np.ndarray  # (S, N)
    lam: float

    def __post_init__(self):
        p = self.probabilities
        # entries may saturate to exactly 0/1 in f64 at small temperatures
        if np.any(p < 0) or np.any(p > 1):
            raise TeacherError("bad_probability", "probabilities must lie in [0, 1]")
        if np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-9):
            raise TeacherError("bad_probability", "probability rows must sum to 1")
        if self.raw_similarities is not None and np.any(
            np.abs(self.raw_similarities) > 1 + 1e-9
        ):
            raise TeacherError("bad_similarity", "cosine similarities must lie in [-1, 1]")

    def probs_for(self, sample_ids: list[str]) -> np.ndarray:
        index = {s: i for i, s in enumerate(self.sample_ids)}
        try:
            rows = [index[s] for s in sample_ids]
        except KeyError as e:
            raise TeacherError("missing_sample", f"no teacher scores for sample {e}") from e
        return self.probabilities[rows]


def teacher_scores(
    images: EmbeddingTable, texts: EmbeddingTable, lam: float = 0.01
) -> TeacherScores:
    if images.kind != EmbeddingKind.TEACHER_IMAGE:
        raise TeacherError("bad_kind", f"expected teacher_image table, got {images.kind.name}")
    if texts.kind != EmbeddingKind.TEACHER_TEXT:
        raise TeacherError("bad_kind", f"expected teacher_text table, got {texts.kind.name}")
    ids = images.keys()
    raw = np.stack([cosine_scores(images.rows[s], texts) for s in ids]) if ids else np.zeros((0, len(texts)))
    probs = softmax_with_temperature(raw, lam) if ids else raw
    return TeacherScores(
        class_order=texts.keys(),
        sample_ids=ids,
        raw_similarities=raw,
        probabilities=probs,
        lam=lam,
    )


def zero_shot_predict(scores: TeacherScores) -> np.ndarray:
    """Per-sample argmax class index; ties go to the lowest index."""
    return np.argmax(scores.probabilities, axis=1)


def save_scores(scores: TeacherScores, path) -> None:
    table = EmbeddingTable(dim=len(scores.class_order), kind=EmbeddingKind.TEACHER_SCORES)
    for i, sid in enumerate(scores.sample_ids):
        table.put(sid, scores.probabilities[i])
    save_embeddings(table, path, footer={"lambda": scores.lam, "class_order": scores.class_order})


def load_scores(path) -> TeacherScores:
    table, footer = load_container(path)
    if table.kind != EmbeddingKind.TEACHER_SCORES:
        raise TeacherError("bad_kind", f"expected teacher_scores file, got kind {table.kind.name}")
    if not footer or "lambda" not in footer or "class_order" not in footer:
        raise TeacherError("bad_footer", "scores file missing lambda/class_order footer")
    ids = table.keys()
    probs = table.matrix()
    if len(ids):
        # disk payload is f32; renormalize rows so the sum invariant holds
        probs = probs / probs.sum(axis=1, keepdims=True)
    return TeacherScores(
        class_order=list(footer["class_order"]),
        sample_ids=ids,
        raw_similarities=None,
        probabilities=probs,
        lam=float(footer["lambda"]),
    )
