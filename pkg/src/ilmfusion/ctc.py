"""CTC forward-backward and label-synchronous prefix scoring, in log space."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

NEG_INF = -np.inf


def _lse(*xs):
    out = xs[0]
    for x in xs[1:]:
        out = np.logaddexp(out, x)
    return out


def ctc_min_frames(labels) -> int:
    """Frames needed to emit ``labels``: one per label plus a blank between repeats."""
    labels = list(labels)
    repeats = sum(1 for a, b in zip(labels, labels[1:]) if a == b)
    return len(labels) + repeats


def ctc_forward_backward(log_probs: np.ndarray, labels, blank: int = 0):
    """Negative log-likelihood and per-frame label occupancy.

    ``log_probs`` is [T, C] (rows log-normalised), ``labels`` index into C.
    Returns ``(nll, occupancy)`` where ``occupancy[t, k]`` is the posterior
    probability that frame t emits k; it is the gradient of ``log p`` with
    respect to ``log_probs``.
    """
    lp = np.asarray(log_probs, dtype=np.float64)
    T, C = lp.shape
    labels = np.asarray(labels, dtype=np.int64)
    ext = np.full(2 * len(labels) + 1, blank, dtype=np.int64)
    ext[1::2] = labels
    S = ext.size
    skip = np.zeros(S, dtype=bool)
    if S > 2:
        skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])
    emit = lp[:, ext]  # [T, S]

    with np.errstate(invalid="ignore"):
        alpha = np.full((T, S), NEG_INF)
        alpha[0, 0] = emit[0, 0]
        if S > 1:
            alpha[0, 1] = emit[0, 1]
        for t in range(1, T):
            prev = alpha[t - 1]
            a = prev.copy()
            a[1:] = np.logaddexp(a[1:], prev[:-1])
            a[2:] = np.where(skip[2:], np.logaddexp(a[2:], prev[:-2]), a[2:])
            alpha[t] = a + emit[t]

        beta = np.full((T, S), NEG_INF)
        beta[T - 1, S - 1] = 0.0
        if S > 1:
            beta[T - 1, S - 2] = 0.0
        for t in range(T - 2, -1, -1):
            nxt = beta[t + 1] + emit[t + 1]
            b = nxt.copy()
            b[:-1] = np.logaddexp(b[:-1], nxt[1:])
            b[:-2] = np.where(skip[2:], np.logaddexp(b[:-2], nxt[2:]), b[:-2])
            beta[t] = b

    logp = alpha[T - 1, S - 1] if S == 1 else np.logaddexp(alpha[T - 1, S - 1], alpha[T - 1, S - 2])
    occ = np.zeros((T, C))
    if np.isfinite(logp):
        post = np.exp(alpha + beta - logp)
        for s in range(S):
            occ[:, ext[s]] += post[:, s]
    return -float(logp), occ


def ctc_log_likelihood(log_probs: np.ndarray, labels, blank: int = 0) -> float:
    return -ctc_forward_backward(log_probs, labels, blank)[0]


@dataclass
class CtcState:
    """Forward variables of one prefix: ``r[t] = (log r_n, log r_b)``."""

    r: np.ndarray
    psi: float
    last: int | None
    length: int


class CtcPrefixScorer:
    """Prefix probabilities of CTC alignments for one utterance.

    ``log_post`` is [T, V] over the full vocabulary; ids the CTC head does
    not emit carry ``-inf``.  ``eos`` maps to the probability of the whole
    prefix as a complete sequence.
    """

    def __init__(self, log_post: np.ndarray, blank: int, eos: int):
        self.x = np.asarray(log_post, dtype=np.float64)
        self.T = self.x.shape[0]
        self.blank = blank
        self.eos = eos

    def initial_state(self) -> CtcState:
        r = np.full((self.T, 2), NEG_INF)
        r[:, 1] = np.cumsum(self.x[:, self.blank])
        return CtcState(r=r, psi=0.0, last=None, length=0)

    def extend(self, state: CtcState, tokens) -> tuple[np.ndarray, np.ndarray]:
        """Prefix log scores of ``state`` extended by each of ``tokens``.

        Returns ``(psi [K], r [K, T, 2])``; rows for eos carry no useful
        forward variables.
        """
        tokens = np.asarray(tokens, dtype=np.int64)
        if np.any(tokens == self.blank):
            raise ValueError("blank cannot extend a prefix")
        K = tokens.size
        x = self.x[:, tokens]  # [T, K]
        xb = self.x[:, self.blank]
        r_prev = state.r
        total_prev = np.logaddexp(r_prev[:, 0], r_prev[:, 1])
        phi = np.repeat(total_prev[:, None], K, axis=1)
        if state.last is not None:
            same = tokens == state.last
            phi[:, same] = r_prev[:, 1][:, None]

        rn = np.full((self.T, K), NEG_INF)
        rb = np.full((self.T, K), NEG_INF)
        if state.length == 0:
            rn[0] = x[0]
        psi = rn[0].copy()
        for t in range(1, self.T):
            rn[t] = np.logaddexp(rn[t - 1], phi[t - 1]) + x[t]
            rb[t] = np.logaddexp(rn[t - 1], rb[t - 1]) + xb[t]
            psi = np.logaddexp(psi, phi[t - 1] + x[t])

        is_eos = tokens == self.eos
        if np.any(is_eos):
            psi[is_eos] = total_prev[-1]
        r = np.stack([rn.T, rb.T], axis=-1)  # [K, T, 2]
        return psi, r

    def advance(self, state: CtcState, token: int, psi: float, r: np.ndarray) -> CtcState:
        return CtcState(r=r, psi=float(psi), last=int(token), length=state.length + 1)
