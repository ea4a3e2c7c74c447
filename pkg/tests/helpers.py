import numpy as np

from kgvl.pipeline import Region

CHURCH_TSV = (
    "bride\tRelatedTo\tchurch\t3.2\n"
    "church\tUsedFor\tget married\t2.8\n"
    "church\tIsA\tbuilding\t1.1\n"
)


def full_image_regions(n=1, d_app=4, width=100.0, height=80.0, seed=0):
    """Full-image region followed by ``n - 1`` random boxes."""
    rng = np.random.default_rng(seed)
    regions = [Region((0, 0, width, height), rng.normal(size=d_app), None)]
    for _ in range(n - 1):
        x = np.sort(rng.uniform(0, width, 2))
        y = np.sort(rng.uniform(0, height, 2))
        regions.append(Region((x[0], y[0], x[1], y[1]), rng.normal(size=d_app), "thing"))
    return regions


def plain_block(x, p, heads, visible=None):
    """Straightforward per-head, per-row reference block (masked softmax by
    exclusion rather than by an additive constant)."""
    n, d = x.shape
    dh = d // heads
    q, k, v = x @ p["wq"], x @ p["wk"], x @ p["wv"]
    ctx = np.zeros((n, d))
    for h in range(heads):
        cols = slice(h * dh, (h + 1) * dh)
        for i in range(n):
            keep = [j for j in range(n) if visible is None or visible[i, j]]
            logits = np.array([q[i, cols] @ k[j, cols] for j in keep]) / np.sqrt(dh)
            w = np.exp(logits - logits.max())
            w /= w.sum()
            ctx[i, cols] = sum(wj * v[j, cols] for wj, j in zip(w, keep))

    def ln(y, g, b):
        mu = y.mean(axis=1, keepdims=True)
        var = ((y - mu) ** 2).mean(axis=1, keepdims=True)
        return (y - mu) / np.sqrt(var + 1e-12) * g + b

    def gelu_ref(z):
        return 0.5 * z * (1 + np.tanh(np.sqrt(2 / np.pi) * (z + 0.044715 * z**3)))

    h1 = ln(x + ctx @ p["wo"], p["ln1_g"], p["ln1_b"])
    ff = gelu_ref(h1 @ p["w1"] + p["b1"]) @ p["w2"] + p["b2"]
    return ln(h1 + ff, p["ln2_g"], p["ln2_b"])


# criterion number -> (passed, title, detail); filled by test_acceptance and
# printed at the end of the pytest run
ACCEPTANCE: dict[int, tuple[bool, str, str]] = {}
