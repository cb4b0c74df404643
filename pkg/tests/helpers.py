"""Shared test fixtures: toy grammars, a table-backed bigram scorer, and an
independently coded reference forward pass used as a second-implementation
oracle for the model."""

from __future__ import annotations

import math

import numpy as np

from tinyvlm.model import ModelConfig, ParameterSet, shape_manifest

# ---------------------------------------------------------------------------
# toy corpora: a tiny agreement grammar and a disjoint caption vocabulary
# ---------------------------------------------------------------------------

SG_NOUNS = ["cat", "dog", "bird", "fox", "horse"]
PL_NOUNS = ["cats", "dogs", "birds", "foxes", "horses"]
SG_VERBS = ["sleeps", "runs", "jumps", "sings", "waits"]
PL_VERBS = ["sleep", "run", "jump", "sing", "wait"]
ADVERBS = ["now", "today", "quietly", "there"]

COLORS = ["red", "blue", "green", "yellow", "purple"]
SHAPES = ["circle", "square", "triangle", "star", "hexagon"]
RELATIONS = ["above", "below", "beside", "near"]


def grammar_sentences(n: int, seed: int) -> list[str]:
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        i = int(rng.integers(len(SG_NOUNS)))
        j = int(rng.integers(len(SG_VERBS)))
        a = ADVERBS[int(rng.integers(len(ADVERBS)))]
        if rng.random() < 0.5:
            out.append(f"the {SG_NOUNS[i]} {SG_VERBS[j]} {a}")
        else:
            out.append(f"the {PL_NOUNS[i]} {PL_VERBS[j]} {a}")
    return out


def agreement_pairs(n: int, seed: int) -> list[tuple[str, str]]:
    """(grammatical, ungrammatical) pairs violating subject-verb agreement."""
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(n):
        i = int(rng.integers(len(SG_NOUNS)))
        j = int(rng.integers(len(SG_VERBS)))
        a = ADVERBS[int(rng.integers(len(ADVERBS)))]
        if rng.random() < 0.5:
            good = f"the {SG_NOUNS[i]} {SG_VERBS[j]} {a}"
            bad = f"the {SG_NOUNS[i]} {PL_VERBS[j]} {a}"
        else:
            good = f"the {PL_NOUNS[i]} {PL_VERBS[j]} {a}"
            bad = f"the {PL_NOUNS[i]} {SG_VERBS[j]} {a}"
        pairs.append((good, bad))
    return pairs


def caption_sentences(n: int, seed: int) -> list[str]:
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        c1, c2 = rng.integers(len(COLORS)), rng.integers(len(COLORS))
        s1, s2 = rng.integers(len(SHAPES)), rng.integers(len(SHAPES))
        r = RELATIONS[int(rng.integers(len(RELATIONS)))]
        out.append(f"a {COLORS[c1]} {SHAPES[s1]} {r} a {COLORS[c2]} {SHAPES[s2]}")
    return out


# ---------------------------------------------------------------------------
# table-backed bigram scorer (word level, pure Python floats)
# ---------------------------------------------------------------------------

class BigramTableScorer:
    """Word-level bigram model with explicit per-caption image adjustments.

    Chain scoring starts from the sentinel "<s>"; unseen transitions get
    ``default_logp``. Sums run left to right in plain Python so independent
    re-computation in a test reproduces them exactly.
    """

    def __init__(self, table: dict, default_logp: float = -10.0, caption_table: dict | None = None):
        self.table = dict(table)
        self.default_logp = default_logp
        self.caption_table = dict(caption_table or {})

    def _chain(self, words, prev="<s>"):
        total = 0.0
        for w in words:
            total += self.table.get((prev, w), self.default_logp)
            prev = w
        return total, prev

    def score_text(self, text: str) -> float:
        total, _ = self._chain(text.split())
        return total

    def score_continuation(self, prefix: str, continuation: str) -> float:
        _, prev = self._chain(prefix.split())
        total, _ = self._chain(continuation.split(), prev)
        return total

    def score_caption(self, caption: str, image_key: str) -> float:
        return self.caption_table[(caption, image_key)]


class TransformedScorer:
    """Applies a strictly increasing transform to every score of a base scorer."""

    def __init__(self, base, fn):
        self.base = base
        self.fn = fn

    def score_text(self, text):
        return self.fn(self.base.score_text(text))

    def score_continuation(self, prefix, continuation):
        return self.fn(self.base.score_continuation(prefix, continuation))

    def score_caption(self, caption, image_key):
        return self.fn(self.base.score_caption(caption, image_key))


# ---------------------------------------------------------------------------
# a transformer whose logits realize an explicit bigram logit table
# ---------------------------------------------------------------------------

def bigram_transformer(logit_table: np.ndarray, img_token_id: int = 4,
                       max_len: int = 32) -> ParameterSet:
    """Build params so logits at each position equal logit_table[current token].

    All mixing paths (attention output, feed-forward down projection) are
    zeroed, embeddings are one-hot, and the LM head un-does the final RMS
    norm scale, so the model is an exact bigram table.
    """
    V = logit_table.shape[0]
    cfg = ModelConfig(n_layers=1, d_model=V, n_heads=1, d_ff=4, vocab_size=V,
                      max_len=max_len, feat_dim=3, img_token_id=img_token_id, seed=0)
    tensors = {name: np.zeros(shape, dtype=np.float64) for name, shape in shape_manifest(cfg)}
    for name in tensors:
        if name.endswith(".gain"):
            tensors[name][:] = 1.0
    tensors["embed.weight"][:] = np.eye(V)
    inv = 1.0 / math.sqrt(1.0 / V + 1e-6)  # RMS-norm scale of a one-hot row
    tensors["lm_head.weight"][:] = logit_table / inv
    return ParameterSet(tensors, cfg)


# ---------------------------------------------------------------------------
# independent reference forward pass (pure Python, no numpy linear algebra)
# ---------------------------------------------------------------------------

def reference_forward(params: ParameterSet, token_ids, image_feature=None):
    """Second implementation of the model forward pass, written with explicit
    loops and math.* only; used to cross-check logits."""
    cfg = params.config
    P = {k: v.tolist() for k, v in params.tensors.items()}
    d, H = cfg.d_model, cfg.n_heads
    hd = d // H
    T = len(token_ids)

    def matvec(mat, vec):
        return [sum(vec[i] * mat[i][j] for i in range(len(vec))) for j in range(len(mat[0]))]

    def rms(vec, gain):
        s = sum(x * x for x in vec) / len(vec)
        inv = 1.0 / math.sqrt(s + 1e-6)
        return [x * inv * g for x, g in zip(vec, gain)]

    def gelu(x):
        return 0.5 * x * (1.0 + math.erf(x / math.sqrt(2.0)))

    def silu(x):
        return x / (1.0 + math.exp(-x))

    x = [list(P["embed.weight"][t]) for t in token_ids]
    for pos, t in enumerate(token_ids):
        if t == cfg.img_token_id:
            f = list(image_feature)
            h1 = [sum(f[i] * P["proj.w1"][i][j] for i in range(cfg.feat_dim)) + P["proj.b1"][j]
                  for j in range(d)]
            a = [gelu(v) for v in h1]
            x[pos] = [sum(a[i] * P["proj.w2"][i][j] for i in range(d)) + P["proj.b2"][j]
                      for j in range(d)]

    for layer in range(cfg.n_layers):
        p = f"layers.{layer}."
        n1 = [rms(row, P[p + "attn_norm.gain"]) for row in x]
        q = [matvec(P[p + "attn.wq"], row) for row in n1]
        k = [matvec(P[p + "attn.wk"], row) for row in n1]
        v = [matvec(P[p + "attn.wv"], row) for row in n1]

        def rotate(vec, pos):
            out = list(vec)
            for h in range(H):
                base = h * hd
                for j in range(hd // 2):
                    theta = pos * (10000.0 ** (-2.0 * j / hd))
                    c, s = math.cos(theta), math.sin(theta)
                    a_, b_ = vec[base + j], vec[base + j + hd // 2]
                    out[base + j] = a_ * c - b_ * s
                    out[base + j + hd // 2] = a_ * s + b_ * c
            return out

        qr = [rotate(q[t], t) for t in range(T)]
        kr = [rotate(k[t], t) for t in range(T)]
        ctx = [[0.0] * d for _ in range(T)]
        for h in range(H):
            base = h * hd
            for t in range(T):
                scores = []
                for j in range(t + 1):
                    s = sum(qr[t][base + m] * kr[j][base + m] for m in range(hd))
                    scores.append(s / math.sqrt(hd))
                mx = max(scores)
                es = [math.exp(s - mx) for s in scores]
                Z = sum(es)
                for j in range(t + 1):
                    w = es[j] / Z
                    for m in range(hd):
                        ctx[t][base + m] += w * v[j][base + m]
        ao = [matvec(P[p + "attn.wo"], row) for row in ctx]
        x = [[a + b for a, b in zip(x[t], ao[t])] for t in range(T)]
        n2 = [rms(row, P[p + "ffn_norm.gain"]) for row in x]
        gpre = [matvec(P[p + "ffn.w_gate"], row) for row in n2]
        upre = [matvec(P[p + "ffn.w_up"], row) for row in n2]
        hmid = [[silu(a) * b for a, b in zip(gpre[t], upre[t])] for t in range(T)]
        fo = [matvec(P[p + "ffn.w_down"], row) for row in hmid]
        x = [[a + b for a, b in zip(x[t], fo[t])] for t in range(T)]

    nf = [rms(row, P["final_norm.gain"]) for row in x]
    return np.array([matvec(P["lm_head.weight"], row) for row in nf])
