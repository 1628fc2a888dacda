"""
How attention cost grows with image size
========================================

Analytic FLOP and memory counts for channel attention against ordinary
token self-attention, plus a quick timing at small sizes.
"""

from csvt.bench import (attention_flops, fit_slope, memory_model, model_gmac, run_scaling)
from csvt.model import DESK_CONFIG, FULL_CONFIG

d, h, p = 384, 4, 8
sizes = [224, 336, 448, 560, 672]
ns = [(s // p) ** 2 for s in sizes]

print(f"{'size':>5} {'tokens':>7} {'cba MFLOP':>10} {'sa MFLOP':>10} {'cba attn':>9} {'sa attn':>11}")
for s, n in zip(sizes, ns):
    print(f"{s:5d} {n:7d} {attention_flops('cba', n, d, h) / 1e6:10.1f} "
          f"{attention_flops('sa', n, d, h) / 1e6:10.1f} {memory_model('cba', n, d, h):9d} "
          f"{memory_model('sa', n, d, h):11d}")

# slopes on a log-log scale: 1 means linear in tokens, 2 quadratic
print("cba slope", round(fit_slope(ns, [attention_flops("cba", n, d, h) for n in ns]), 3))
print("sa slope ", round(fit_slope(ns, [attention_flops("sa", n, d, h) for n in ns]), 3))

# whole-network multiply-accumulates at 224 pixels
print("full model GMac, patch 8: ", round(model_gmac(FULL_CONFIG, 224), 2))
print("full model GMac, patch 16:", round(model_gmac(FULL_CONFIG.with_(patch_size=16), 224), 2))

# timings of one attention stage at desk width (64 channels)
report = run_scaling([64, 128, 192, 256], DESK_CONFIG, repeats=5)
for rec in report.records:
    print(f"{rec.variant:>3} {rec.input_size:4d}px {rec.ms_mean:8.2f} ms")
print("self-attention / channel attention time:", [round(r, 2) for r in report.ratios()])
