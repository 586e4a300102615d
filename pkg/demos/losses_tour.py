"""Evaluate every loss on one small batch and print value and gradient norm.

Run: python3 demos/losses_tour.py
"""

import numpy as np

import metric_forge as mf

rng = np.random.default_rng(0)
labels = np.repeat(np.arange(4), 2)  # two samples per class, as N-pair expects
batch = mf.EmbeddingBatch(mf.l2_normalize_rows(rng.standard_normal((8, 6))), labels)
proxies = mf.init_proxies(4, 6, 1, rng)
gml_proxies = mf.init_proxies(4, 6, 2, rng)
masks = mf.ms_mine(batch.data @ batch.data.T, labels, 0.1)

losses = {
    "contrastive": lambda: mf.batch_contrastive_loss(batch, 1.0),
    "triplet (euclidean)": lambda: mf.batch_triplet_loss(batch, 0.2, "euclidean"),
    "triplet (cosine)": lambda: mf.batch_triplet_loss(batch, 0.2, "cosine"),
    "n-pair": lambda: mf.npair_loss(batch),
    "multi-similarity": lambda: mf.ms_loss(batch, masks),
    "nca": lambda: mf.nca_loss(batch),
    "proxynca": lambda: mf.proxynca_loss(batch, proxies),
    "proxynca++ (T=0.1)": lambda: mf.proxynca_pp_loss(batch, proxies, 0.1),
    "proxy anchor": lambda: mf.proxy_anchor_loss(batch, proxies),
    "proxygml (M=2, K=4)": lambda: mf.proxygml_loss(batch, gml_proxies, mf.ProxyGmlConfig(4, 0.3, 2)),
    "directed ms (gamma=1)": lambda: mf.directed_ms_loss(batch, masks, gamma=1.0),
    "directed proxynca (gamma=1)": lambda: mf.directed_proxynca_loss(batch, proxies, 1.0),
}

print(f"{'loss':<30}{'value':>12}{'|grad f|':>12}{'|grad P|':>12}")
for name, fn in losses.items():
    out = fn()
    gp = "" if out.grad_proxies is None else f"{np.linalg.norm(out.grad_proxies):12.4f}"
    print(f"{name:<30}{out.value:12.4f}{np.linalg.norm(out.grad_embeddings):12.4f}{gp}")
