"""Independent reference implementations used as test oracles.

Everything here is written with explicit Python loops over lists of floats,
deliberately avoiding the package's tensor engine (and numpy where the
arithmetic matters), so that agreement between the two is meaningful.
"""

import math


def matmul_loops(a, b):
    m, k, n = len(a), len(b), len(b[0])
    out = [[0.0] * n for _ in range(m)]
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i][t] * b[t][j]
            out[i][j] = s
    return out


def matvec_t(w, x):
    """w is [out][in]; returns w @ x for a vector x."""
    return [sum(w[o][i] * x[i] for i in range(len(x))) for o in range(len(w))]


def silu(v):
    return v / (1.0 + math.exp(-v))


def softmax(xs):
    m = max(xs)
    es = [math.exp(v - m) for v in xs]
    z = sum(es)
    return [e / z for e in es]


def rmsnorm_vec(x, gain, eps):
    ms = sum(v * v for v in x) / len(x)
    inv = 1.0 / math.sqrt(ms + eps)
    return [x[i] * inv * gain[i] for i in range(len(x))]


def layernorm_vec(x, gain, eps):
    n = len(x)
    mu = sum(x) / n
    var = sum((v - mu) ** 2 for v in x) / n
    inv = 1.0 / math.sqrt(var + eps)
    return [(x[i] - mu) * inv * gain[i] for i in range(n)]


def rope_rotate(vec, pos, theta):
    """Rotate one head vector: dim i pairs with i + hd/2."""
    hd = len(vec)
    half = hd // 2
    out = [0.0] * hd
    for i in range(half):
        ang = pos * theta ** (-2.0 * i / hd)
        c, s = math.cos(ang), math.sin(ang)
        out[i] = vec[i] * c - vec[i + half] * s
        out[i + half] = vec[i + half] * c + vec[i] * s
    return out


def oracle_forward(config, params, token_ids):
    """Naive forward pass; params maps internal names to nested float lists.

    Returns logits as a [T][V] list of lists. Supports all three residual
    variants, rope/none positions, and dense or top-2 MoE FFN layers.
    """
    cfg = config
    d = cfg["hidden_dim"]
    heads, hd = cfg["num_heads"], cfg["head_dim"]
    eps = cfg["norm_eps"]
    norm = rmsnorm_vec if cfg["norm_kind"] == "rmsnorm" else layernorm_vec
    variant = cfg["residual_variant"]
    moe = cfg.get("moe")
    moe_layers = set(moe["moe_layers"]) if moe else set()
    T = len(token_ids)

    xs = [list(params["embed"][t]) for t in token_ids]

    def ffn_vec(x, prefix):
        g = matvec_t(params[f"{prefix}.w_gate"], x)
        u = matvec_t(params[f"{prefix}.w_up"], x)
        inter = [silu(g[j]) * u[j] for j in range(len(g))]
        return matvec_t(params[f"{prefix}.w_down"], inter)

    for l in range(1, cfg["num_layers"] + 1):
        ln1 = [norm(x, params[f"layers.{l}.norm_attn"], eps) for x in xs]
        qs = [matvec_t(params[f"layers.{l}.attn.wq"], x) for x in ln1]
        ks = [matvec_t(params[f"layers.{l}.attn.wk"], x) for x in ln1]
        vs = [matvec_t(params[f"layers.{l}.attn.wv"], x) for x in ln1]
        ctx = [[0.0] * d for _ in range(T)]
        for h in range(heads):
            lo = h * hd
            qh = [q[lo : lo + hd] for q in qs]
            kh = [k[lo : lo + hd] for k in ks]
            vh = [v[lo : lo + hd] for v in vs]
            if cfg["positional"] == "rope":
                theta = cfg["rope_theta"]
                qh = [rope_rotate(qh[t], t, theta) for t in range(T)]
                kh = [rope_rotate(kh[t], t, theta) for t in range(T)]
            for qpos in range(T):
                scores = [
                    sum(qh[qpos][i] * kh[kpos][i] for i in range(hd)) / math.sqrt(hd)
                    for kpos in range(qpos + 1)
                ]
                probs = softmax(scores)
                for kpos in range(qpos + 1):
                    for i in range(hd):
                        ctx[qpos][lo + i] += probs[kpos] * vh[kpos][i]
        attn = [matvec_t(params[f"layers.{l}.attn.wo"], c) for c in ctx]
        if variant == "sandwich_ln":
            attn = [norm(a, params[f"layers.{l}.norm_attn_post"], eps) for a in attn]
        h_hat = [[xs[t][i] + attn[t][i] for i in range(d)] for t in range(T)]
        ln2 = [norm(x, params[f"layers.{l}.norm_ffn"], eps) for x in h_hat]
        if l in moe_layers:
            ffn = []
            for x in ln2:
                logits_r = [
                    sum(x[i] * params[f"layers.{l}.moe.router"][i][e] for i in range(d))
                    for e in range(moe["num_experts"])
                ]
                probs = softmax(logits_r)
                order = sorted(range(len(probs)), key=lambda e: (-probs[e], e))
                e1, e2 = order[0], order[1]
                w1 = probs[e1] / (probs[e1] + probs[e2])
                w2 = probs[e2] / (probs[e1] + probs[e2])
                o1 = ffn_vec(x, f"layers.{l}.moe.experts.{e1}")
                o2 = ffn_vec(x, f"layers.{l}.moe.experts.{e2}")
                ffn.append([w1 * o1[i] + w2 * o2[i] for i in range(d)])
        else:
            ffn = [ffn_vec(x, f"layers.{l}.ffn") for x in ln2]
        if variant == "sandwich_ln":
            ffn = [norm(f, params[f"layers.{l}.norm_ffn_post"], eps) for f in ffn]
        xs = [[h_hat[t][i] + ffn[t][i] for i in range(d)] for t in range(T)]

    final = [norm(x, params["final_norm"], eps) for x in xs]
    lm = params["lm_head"]  # [d][V]
    v_size = len(lm[0])
    return [
        [sum(x[i] * lm[i][j] for i in range(d)) for j in range(v_size)] for x in final
    ]


def full_context_nll(logits_rows, ids):
    """Mean NLL of ids[1:] under single-pass logits; perplexity oracle."""
    total = 0.0
    for t in range(1, len(ids)):
        row = logits_rows[t - 1]
        m = max(row)
        lse = m + math.log(sum(math.exp(v - m) for v in row))
        total += lse - row[ids[t]]
    return total / (len(ids) - 1)
