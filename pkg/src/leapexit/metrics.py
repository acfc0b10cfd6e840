"""Layer analyses, exit statistics and embedding-quality metrics."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import ContractError, DegenerateInputError
from .exits import ExitPolicy, infer_corpus
from .encoder import forward_trace
from .tensor import no_grad


# -- per-trace geometry -------------------------------------------------------

def _cos_rows(a, b):
    return np.sum(a * b, axis=-1) / (np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1))


def contraction_ratio(pooled, tol=1e-12):
    """gamma_l = ||p_{l+1} - p_l|| / ||p_l - p_{l-1}|| for l = 2..L-1.

    ``pooled`` is (L, d). Entry i of the result is gamma_{i+2}; entries whose
    denominator is below ``tol`` are NaN.
    """
    p = np.asarray(pooled, dtype=float)
    if p.shape[0] < 3:
        raise ContractError("contraction ratio needs at least 3 layers")
    step = np.linalg.norm(np.diff(p, axis=0), axis=1)
    num, den = step[1:], step[:-1]
    out = np.full(num.shape, np.nan)
    ok = den >= tol
    out[ok] = num[ok] / den[ok]
    return out


@dataclass
class DirectionalConvergence:
    gradient: np.ndarray  # sim_to_final[l+1] - sim_to_final[l], l = 1..L-1
    monotone: np.ndarray  # gradient >= 0
    alignment: np.ndarray  # cos(p_{l+1} - p_l, p_L - p_l); NaN where undefined
    defined: np.ndarray


def sim_to_final(pooled):
    """cos(p_l, p_L) for every layer of an (L, d) or (N, L, d) array."""
    p = np.asarray(pooled, dtype=float)
    return _cos_rows(p, p[..., -1:, :])


def stability(pooled):
    """cos(p_l, p_{l-1}); the first layer has no predecessor and is NaN."""
    p = np.asarray(pooled, dtype=float)
    out = np.full(p.shape[:-1], np.nan)
    out[..., 1:] = _cos_rows(p[..., 1:, :], p[..., :-1, :])
    return out


def directional_convergence(pooled, tol=1e-12):
    p = np.asarray(pooled, dtype=float)
    if p.shape[0] < 2:
        raise ContractError("directional convergence needs at least 2 layers")
    sims = sim_to_final(p)
    grad = np.diff(sims)
    step = np.diff(p, axis=0)
    to_final = p[-1] - p[:-1]
    ns, nf = np.linalg.norm(step, axis=1), np.linalg.norm(to_final, axis=1)
    defined = (ns >= tol) & (nf >= tol)
    align = np.full(len(step), np.nan)
    align[defined] = np.sum(step[defined] * to_final[defined], axis=1) / (ns[defined] * nf[defined])
    return DirectionalConvergence(grad, grad >= 0, align, defined)


# -- corpus-level analysis ----------------------------------------------------

def pooled_corpus(model, tokens, mask, batch_size=64):
    """(N, L, d) pooled vectors for a padded corpus."""
    out = []
    with no_grad():
        for s in range(0, len(tokens), batch_size):
            out.append(forward_trace(model, tokens[s:s + batch_size], mask[s:s + batch_size]).pooled_array())
    return np.concatenate(out, axis=0)


@dataclass
class LayerAnalysis:
    sim_to_final: np.ndarray
    stability: np.ndarray
    contraction: np.ndarray  # median gamma per layer, NaN at l=1 and l=L
    alignment: np.ndarray  # mean final-aligned displacement per transition l -> l+1
    monotone_fraction: float

    def rows(self):
        n = len(self.sim_to_final)
        align = np.append(self.alignment, np.nan)
        return [{"layer": l + 1, "sim_to_final": self.sim_to_final[l], "stability": self.stability[l],
                 "contraction": self.contraction[l], "alignment": align[l]} for l in range(n)]


def analyze_layers(pooled):
    """Corpus means of the per-layer quantities for an (N, L, d) array."""
    p = np.asarray(pooled, dtype=float)
    n, L, _ = p.shape
    sims = sim_to_final(p)
    stab = stability(p)
    gam = np.full((n, L), np.nan)
    aligns = np.full((n, L - 1), np.nan)
    mono = []
    for i in range(n):
        if L >= 3:
            gam[i, 1:-1] = contraction_ratio(p[i])
        dc = directional_convergence(p[i])
        aligns[i] = dc.alignment
        mono.append(dc.monotone)
    mean_sims = sims.mean(axis=0)
    with np.errstate(all="ignore"):
        contraction = np.array([np.nanmedian(c) if np.isfinite(c).any() else np.nan for c in gam.T])
        alignment = np.array([np.nanmean(a) if np.isfinite(a).any() else np.nan for a in aligns.T])
        stab_mean = np.array([np.nanmean(s) if np.isfinite(s).any() else np.nan for s in stab.T])
    return LayerAnalysis(mean_sims, stab_mean,
                         contraction, alignment, float(np.mean(np.diff(mean_sims) >= 0)))


# -- retrieval / similarity metrics ------------------------------------------

def _neighbors(emb, k):
    e = emb / np.linalg.norm(emb, axis=1, keepdims=True)
    sims = e @ e.T
    np.fill_diagonal(sims, -np.inf)
    order = np.argsort(-sims, axis=1, kind="stable")
    return order[:, :k]


def nn_at_k(emb_layer, emb_final, k=10):
    """Per-sample |N_k^(l) & N_k^(L)| / k under cosine similarity (self excluded)."""
    a, b = np.asarray(emb_layer, dtype=float), np.asarray(emb_final, dtype=float)
    if a.shape != b.shape:
        raise ContractError("embedding sets must have the same shape")
    n = a.shape[0]
    if n <= k:
        raise ContractError(f"need more than k={k} samples, got {n}")
    na, nb = _neighbors(a, k), _neighbors(b, k)
    per = np.array([len(set(na[i]) & set(nb[i])) / k for i in range(n)])
    return per, float(per.mean())


def spearman(pred, gold):
    """Spearman rho with average ranks for ties."""
    x, y = np.asarray(pred, dtype=float), np.asarray(gold, dtype=float)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 3:
        raise ContractError("spearman needs two equal-length sequences of at least 3 values")
    rx, ry = rankdata(x) - 0.0, rankdata(y) - 0.0
    rx -= rx.mean()
    ry -= ry.mean()
    den = np.sqrt(np.sum(rx * rx) * np.sum(ry * ry))
    if den == 0:
        raise DegenerateInputError("spearman undefined for constant input")
    return float(np.sum(rx * ry) / den)


def ndcg_at_k(ranked_ids, relevant, k=10):
    """DCG@k / IDCG@k with log2 discounts and linear gains; 0 without relevant docs."""
    if k < 1:
        raise ContractError("k must be >= 1")
    gains = sorted((g for g in relevant.values() if g > 0), reverse=True)
    if not gains:
        return 0.0
    dcg = sum(relevant.get(d, 0.0) / np.log2(i + 2) for i, d in enumerate(list(ranked_ids)[:k]))
    idcg = sum(g / np.log2(i + 2) for i, g in enumerate(gains[:k]))
    return float(dcg / idcg)


# -- exit statistics ------------------------------------------------------------

@dataclass
class ExitDistribution:
    num_layers: int
    probs: np.ndarray  # probs[l-1] = P(exit at layer l)
    expected_layers: float
    layer_reduction: float
    cumulative: np.ndarray  # cumulative[l-1] = P(exit at layer <= l)

    def exit_rate(self, by_layer=None):
        """Fraction exiting at or before ``by_layer`` (default: before the last layer)."""
        l = self.num_layers - 1 if by_layer is None else by_layer
        return float(self.cumulative[l - 1]) if l >= 1 else 0.0

    def rows(self):
        return [{"layer": l + 1, "exit_prob": self.probs[l], "cumulative": self.cumulative[l]}
                for l in range(self.num_layers)]


def exit_distribution(results, num_layers):
    layers = np.array([r if isinstance(r, (int, np.integer)) else r.exit_layer for r in results])
    if len(layers) == 0:
        raise ContractError("exit distribution of an empty result set")
    counts = np.bincount(layers, minlength=num_layers + 1)[1:num_layers + 1]
    probs = counts / counts.sum()
    expected = float(np.sum(np.arange(1, num_layers + 1) * probs))
    return ExitDistribution(num_layers, probs, expected, num_layers / expected, np.cumsum(probs))


def viable_layers(sims, nn_scores, sim_min=0.95, nn_min=0.80):
    """Layers (1-based) meeting both the similarity and NN@k floors."""
    return [l + 1 for l, (s, n) in enumerate(zip(sims, nn_scores)) if s >= sim_min and n >= nn_min]


def layer_nn_scores(pooled, k=10):
    """Mean NN@k of each layer against the final layer for (N, L, d) pooled vectors."""
    p = np.asarray(pooled)
    return np.array([nn_at_k(p[:, l], p[:, -1], k)[1] for l in range(p.shape[1])])


# -- quality on graded pairs ------------------------------------------------------

def pair_spearman(model, corpus, policy=ExitPolicy(strategy="none"), batch_size=64):
    """Spearman of exited-embedding cosine vs gold over the corpus pairs.

    Returns (rho, exit results for the pair sentences, in pair order a0, b0, a1, b1, ...).
    """
    order = corpus.pairs.reshape(-1)
    tokens, mask = corpus.arrays(order)
    results = infer_corpus(model, tokens, mask, policy, batch_size)
    emb = np.stack([r.embedding for r in results])
    sims = np.sum(emb[0::2] * emb[1::2], axis=1)
    return spearman(sims, corpus.scores), results


@dataclass
class ParetoRow:
    theta: float
    quality: float
    expected_layers: float
    layer_reduction: float
    exit_at_ref: float
    exit_rate: float


def pareto_sweep(model, corpus, thetas, policy_base=ExitPolicy(), ref_layer=7, batch_size=64):
    """One row per threshold; quality is measured on exited embeddings."""
    if len(thetas) == 0:
        raise ContractError("threshold grid is empty")
    rows = []
    for theta in thetas:
        policy = policy_base.with_(theta=float(theta))
        rho, results = pair_spearman(model, corpus, policy, batch_size)
        dist = exit_distribution(results, model.num_layers)
        rows.append(ParetoRow(float(theta), rho, dist.expected_layers, dist.layer_reduction,
                              dist.exit_rate(ref_layer), dist.exit_rate()))
    return rows


def write_csv(rows, path, fmt="{:.6f}"):
    """Write dicts/dataclasses to CSV with fixed float formatting (byte-stable)."""
    rows = [asdict(r) if hasattr(r, "__dataclass_fields__") else dict(r) for r in rows]
    if not rows:
        open(path, "w").close()
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: (fmt.format(v) if isinstance(v, (float, np.floating)) else v) for k, v in r.items()})
