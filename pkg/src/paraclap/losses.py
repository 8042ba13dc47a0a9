"""Multi-view contrastive losses with exact analytic gradients.

The objective aligns a batch of audio embeddings A, original-caption
embeddings T, and two progressively stronger paraphrase views P1, P2 of the
same captions:

    anchor term      l_clap      = (infonce(T -> A) + infonce(A -> T)) / 2
    text-side view   l_text_pk   = infonce(Pk -> T)
    audio-side view  l_audio_pk  = infonce(Pk -> A)
    total            l_final     = l_clap
                                   + lambda_text  * (l_text_p1 + l_text_p2)
                                   + lambda_audio * (l_audio_p1 + l_audio_p2)

infonce(Q -> K) is the cross-entropy of the row-softmax of cosine logits
(cos/tau) against the diagonal match. All gradients are hand-derived
(softmax-CE backprop chained through L2 normalization and the 1/tau scale)
and verified against central finite differences by ``gradcheck``.

The temperature is differentiated in log-space (d loss / d log tau), which is
how the trainer parameterizes it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimMismatch, NonPositiveTau
from .vecmath import as_feature_matrix, logsumexp_rows

TAU_MIN = 0.01
TAU_MAX = 100.0

REDUCTIONS = ("mean", "sum")

#: loss terms recognized by :func:`gradcheck`
TERMS = ("final", "clap", "text_p1", "audio_p1", "text_p2", "audio_p2")


@dataclass(frozen=True)
class TrainBatch:
    """Aligned per-item embeddings (or raw features) for one minibatch.

    Row i of every matrix refers to the same underlying item. ``para1`` is
    the structure-only paraphrase view, ``para2`` the structure+vocabulary
    view.
    """

    audio: np.ndarray
    text: np.ndarray
    para1: np.ndarray
    para2: np.ndarray
    ids: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "audio", as_feature_matrix(self.audio, "audio"))
        object.__setattr__(self, "text", as_feature_matrix(self.text, "text"))
        object.__setattr__(self, "para1", as_feature_matrix(self.para1, "para1"))
        object.__setattr__(self, "para2", as_feature_matrix(self.para2, "para2"))
        n = self.audio.shape[0]
        for name in ("text", "para1", "para2"):
            if getattr(self, name).shape[0] != n:
                raise DimMismatch(f"{name} has {getattr(self, name).shape[0]} rows, audio has {n}")
        d_t = self.text.shape[1]
        for name in ("para1", "para2"):
            if getattr(self, name).shape[1] != d_t:
                raise DimMismatch(f"{name} dim differs from text dim {d_t}")
        if self.ids and len(self.ids) != n:
            raise DimMismatch(f"{len(self.ids)} ids for {n} rows")

    @property
    def n(self) -> int:
        return self.audio.shape[0]


@dataclass(frozen=True)
class LossWeights:
    """Weights of the paraphrase terms and the batch reduction mode."""

    lambda_text: float = 1.0
    lambda_audio: float = 1.0
    reduction: str = "mean"

    def __post_init__(self):
        if self.lambda_text < 0 or self.lambda_audio < 0:
            raise ValueError("loss weights must be >= 0")
        if self.reduction not in REDUCTIONS:
            raise ValueError(f"reduction must be one of {REDUCTIONS}")


@dataclass
class InfonceResult:
    loss: float
    grad_queries: np.ndarray
    grad_keys: np.ndarray
    grad_tau: float
    grad_log_tau: float


@dataclass
class ClapResult:
    loss: float
    grad_text: np.ndarray
    grad_audio: np.ndarray
    grad_tau: float
    grad_log_tau: float


@dataclass
class LossBreakdown:
    """Scalar terms of the composite loss plus gradients for every input."""

    l_clap: float
    l_text_p1: float
    l_audio_p1: float
    l_text_p2: float
    l_audio_p2: float
    l_final: float
    grad_audio: np.ndarray = field(repr=False, default=None)
    grad_text: np.ndarray = field(repr=False, default=None)
    grad_para1: np.ndarray = field(repr=False, default=None)
    grad_para2: np.ndarray = field(repr=False, default=None)
    grad_log_tau: float = 0.0

    def scalars(self) -> dict:
        return {
            "l_clap": self.l_clap,
            "l_text_p1": self.l_text_p1,
            "l_audio_p1": self.l_audio_p1,
            "l_text_p2": self.l_text_p2,
            "l_audio_p2": self.l_audio_p2,
            "l_final": self.l_final,
        }


def _check_tau(tau: float) -> float:
    if not (tau > 0):
        raise NonPositiveTau(tau)
    return float(tau)


def _check_reduction(reduction: str) -> str:
    if reduction not in REDUCTIONS:
        raise ValueError(f"reduction must be one of {REDUCTIONS}")
    return reduction


def _normalized(m: np.ndarray):
    """Rows scaled to unit norm, plus the norms (for the backward pass)."""
    norms = np.linalg.norm(m, axis=1)
    if np.any(norms <= 1e-12):
        from .errors import ZeroNormRow

        i = int(np.flatnonzero(norms <= 1e-12)[0])
        raise ZeroNormRow(i, float(norms[i]))
    return m / norms[:, None], norms


def _normalize_backward(grad_unit: np.ndarray, unit: np.ndarray, norms: np.ndarray) -> np.ndarray:
    """Chain d loss / d(x/||x||) back to d loss / d x."""
    radial = np.sum(grad_unit * unit, axis=1, keepdims=True)
    return (grad_unit - radial * unit) / norms[:, None]


def infonce(queries, keys, tau: float, reduction: str = "mean") -> InfonceResult:
    """One-directional contrastive loss with the diagonal as targets.

    Returns the loss and exact gradients w.r.t. the raw (unnormalized)
    queries, keys, tau and log tau.
    """
    q = as_feature_matrix(queries, "queries")
    k = as_feature_matrix(keys, "keys")
    if q.shape[1] != k.shape[1]:
        raise DimMismatch(f"queries dim {q.shape[1]} != keys dim {k.shape[1]}")
    if q.shape[0] != k.shape[0]:
        raise DimMismatch(f"queries rows {q.shape[0]} != keys rows {k.shape[0]}")
    tau = _check_tau(tau)
    _check_reduction(reduction)

    n = q.shape[0]
    qn, q_norms = _normalized(q)
    kn, k_norms = _normalized(k)
    z = (qn @ kn.T) / tau
    lse = logsumexp_rows(z)
    losses = lse - np.diag(z)
    loss = float(losses.mean() if reduction == "mean" else losses.sum())

    r = 1.0 / n if reduction == "mean" else 1.0
    p = np.exp(z - lse[:, None])
    g = p - np.eye(n)
    g *= r  # d loss / d z

    # z = cos/tau: d loss/d log tau = tau * d loss/d tau = -sum(g * z)
    grad_log_tau = float(-(g * z).sum())
    grad_tau = grad_log_tau / tau

    grad_qn = (g @ kn) / tau
    grad_kn = (g.T @ qn) / tau
    return InfonceResult(
        loss=loss,
        grad_queries=_normalize_backward(grad_qn, qn, q_norms),
        grad_keys=_normalize_backward(grad_kn, kn, k_norms),
        grad_tau=grad_tau,
        grad_log_tau=grad_log_tau,
    )


def clap_loss(text, audio, tau: float, reduction: str = "mean") -> ClapResult:
    """Symmetric two-directional contrastive anchor over original pairs."""
    t2a = infonce(text, audio, tau, reduction)
    a2t = infonce(audio, text, tau, reduction)
    return ClapResult(
        loss=0.5 * (t2a.loss + a2t.loss),
        grad_text=0.5 * (t2a.grad_queries + a2t.grad_keys),
        grad_audio=0.5 * (t2a.grad_keys + a2t.grad_queries),
        grad_tau=0.5 * (t2a.grad_tau + a2t.grad_tau),
        grad_log_tau=0.5 * (t2a.grad_log_tau + a2t.grad_log_tau),
    )


def paraphrase_text_loss(para_k, text, tau: float, reduction: str = "mean") -> InfonceResult:
    """Align paraphrase view k (as queries) with the original captions."""
    return infonce(para_k, text, tau, reduction)


def paraphrase_audio_loss(para_k, audio, tau: float, reduction: str = "mean") -> InfonceResult:
    """Align paraphrase view k (as queries) with the audio embeddings."""
    return infonce(para_k, audio, tau, reduction)


def final_loss(batch: TrainBatch, tau: float, w: LossWeights = LossWeights()) -> LossBreakdown:
    """Composite loss over a batch, with accumulated gradients.

    Paraphrase terms whose weight is exactly 0 are skipped (recorded as 0.0),
    so a zero-weight run degenerates to the anchor loss bit-for-bit.
    """
    tau = _check_tau(tau)
    if batch.audio.shape[1] != batch.text.shape[1]:
        raise DimMismatch(
            f"audio dim {batch.audio.shape[1]} != text dim {batch.text.shape[1]}; "
            "cross-modal terms need a shared embedding space"
        )
    red = w.reduction

    clap = clap_loss(batch.text, batch.audio, tau, red)
    grad_text = clap.grad_text
    grad_audio = clap.grad_audio
    grad_para1 = np.zeros_like(batch.para1)
    grad_para2 = np.zeros_like(batch.para2)
    grad_log_tau = clap.grad_log_tau

    l_text = [0.0, 0.0]
    l_audio = [0.0, 0.0]
    for idx, para in enumerate((batch.para1, batch.para2)):
        grad_para = grad_para1 if idx == 0 else grad_para2
        if w.lambda_text > 0:
            r = paraphrase_text_loss(para, batch.text, tau, red)
            l_text[idx] = r.loss
            grad_para += w.lambda_text * r.grad_queries
            grad_text = grad_text + w.lambda_text * r.grad_keys
            grad_log_tau += w.lambda_text * r.grad_log_tau
        if w.lambda_audio > 0:
            r = paraphrase_audio_loss(para, batch.audio, tau, red)
            l_audio[idx] = r.loss
            grad_para += w.lambda_audio * r.grad_queries
            grad_audio = grad_audio + w.lambda_audio * r.grad_keys
            grad_log_tau += w.lambda_audio * r.grad_log_tau

    l_final = (
        clap.loss
        + w.lambda_text * (l_text[0] + l_text[1])
        + w.lambda_audio * (l_audio[0] + l_audio[1])
    )
    return LossBreakdown(
        l_clap=clap.loss,
        l_text_p1=l_text[0],
        l_audio_p1=l_audio[0],
        l_text_p2=l_text[1],
        l_audio_p2=l_audio[1],
        l_final=l_final,
        grad_audio=grad_audio,
        grad_text=grad_text,
        grad_para1=grad_para1,
        grad_para2=grad_para2,
        grad_log_tau=grad_log_tau,
    )


# --- finite-difference verification -------------------------------------------


def _infonce_value(qn: np.ndarray, kn: np.ndarray, tau: float, r: float) -> float:
    z = (qn @ kn.T) / tau
    return float((logsumexp_rows(z) - np.diag(z)).sum() * r)


def _term_values(audio, text, para1, para2, tau: float, w: LossWeights) -> dict:
    """All six loss scalars in one pass; value-only fast path for gradcheck."""
    r = 1.0 / audio.shape[0] if w.reduction == "mean" else 1.0
    an = audio / np.linalg.norm(audio, axis=1)[:, None]
    tn = text / np.linalg.norm(text, axis=1)[:, None]
    p1n = para1 / np.linalg.norm(para1, axis=1)[:, None]
    p2n = para2 / np.linalg.norm(para2, axis=1)[:, None]

    z_ta = (tn @ an.T) / tau
    lse_rows = logsumexp_rows(z_ta)
    lse_cols = logsumexp_rows(z_ta.T)
    diag = np.diag(z_ta)
    clap = 0.5 * float(((lse_rows - diag).sum() + (lse_cols - diag).sum()) * r)

    vals = {
        "clap": clap,
        "text_p1": _infonce_value(p1n, tn, tau, r),
        "audio_p1": _infonce_value(p1n, an, tau, r),
        "text_p2": _infonce_value(p2n, tn, tau, r),
        "audio_p2": _infonce_value(p2n, an, tau, r),
    }
    vals["final"] = (
        vals["clap"]
        + w.lambda_text * (vals["text_p1"] + vals["text_p2"])
        + w.lambda_audio * (vals["audio_p1"] + vals["audio_p2"])
    )
    return vals


def _analytic_grads(batch: TrainBatch, tau: float, w: LossWeights) -> dict:
    """Per-term analytic gradients, keyed like TERMS. Sub-terms unweighted."""
    zeros = {
        "audio": np.zeros_like(batch.audio),
        "text": np.zeros_like(batch.text),
        "para1": np.zeros_like(batch.para1),
        "para2": np.zeros_like(batch.para2),
    }
    out = {}
    bd = final_loss(batch, tau, w)
    out["final"] = {
        "audio": bd.grad_audio,
        "text": bd.grad_text,
        "para1": bd.grad_para1,
        "para2": bd.grad_para2,
        "log_tau": bd.grad_log_tau,
    }
    c = clap_loss(batch.text, batch.audio, tau, w.reduction)
    out["clap"] = dict(zeros, text=c.grad_text, audio=c.grad_audio, log_tau=c.grad_log_tau)
    for idx, para in ((1, batch.para1), (2, batch.para2)):
        rt = paraphrase_text_loss(para, batch.text, tau, w.reduction)
        out[f"text_p{idx}"] = dict(
            zeros, **{f"para{idx}": rt.grad_queries}, text=rt.grad_keys, log_tau=rt.grad_log_tau
        )
        ra = paraphrase_audio_loss(para, batch.audio, tau, w.reduction)
        out[f"audio_p{idx}"] = dict(
            zeros, **{f"para{idx}": ra.grad_queries}, audio=ra.grad_keys, log_tau=ra.grad_log_tau
        )
    return out


def _rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(1.0, abs(a), abs(n))


def gradcheck(
    batch: TrainBatch,
    tau: float,
    w: LossWeights = LossWeights(),
    step: float = 1e-6,
    terms=TERMS,
) -> float:
    """Worst relative error between analytic and central-difference gradients.

    Perturbs every coordinate of every embedding matrix plus log tau, and
    compares each requested loss term. A single plus/minus sweep yields the
    numeric derivative of all terms at once. Relative error is floored at
    magnitude 1, so near-zero gradients are compared absolutely.
    """
    if not (1e-8 <= step <= 1e-4):
        raise ValueError(f"step must lie in [1e-8, 1e-4], got {step!r}")
    tau = _check_tau(tau)
    analytic = _analytic_grads(batch, tau, w)
    mats = {
        "audio": batch.audio.copy(),
        "text": batch.text.copy(),
        "para1": batch.para1.copy(),
        "para2": batch.para2.copy(),
    }

    def values(tau_val: float) -> dict:
        return _term_values(
            mats["audio"], mats["text"], mats["para1"], mats["para2"], tau_val, w
        )

    worst = 0.0
    for name, m in mats.items():
        flat = m.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = values(tau)
            flat[i] = orig - step
            down = values(tau)
            flat[i] = orig
            for term in terms:
                numeric = (up[term] - down[term]) / (2 * step)
                ana = analytic[term][name].reshape(-1)[i]
                worst = max(worst, _rel_err(ana, numeric))

    log_tau = np.log(tau)
    up = values(float(np.exp(log_tau + step)))
    down = values(float(np.exp(log_tau - step)))
    for term in terms:
        numeric = (up[term] - down[term]) / (2 * step)
        worst = max(worst, _rel_err(analytic[term]["log_tau"], numeric))
    return worst


def seeded_batch(seed: int, n: int, dim: int, scale: float = 1.0) -> TrainBatch:
    """Standard-normal batch for gradient checks and property tests."""
    rng = np.random.default_rng(seed)
    return TrainBatch(
        audio=scale * rng.standard_normal((n, dim)),
        text=scale * rng.standard_normal((n, dim)),
        para1=scale * rng.standard_normal((n, dim)),
        para2=scale * rng.standard_normal((n, dim)),
        ids=tuple(f"item-{i}" for i in range(n)),
    )
