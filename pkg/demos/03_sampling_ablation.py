"""How the hypothesis sampler changes the search.

Greedy sampling walks candidates in confidence order and finds a good pair
almost immediately when detectors are trustworthy. When clutter carries the
highest confidences it gets stuck, while uniform sampling does not care.
"""

from __future__ import annotations

from erclm.eval_harness import ablation_csv, reference_mode, run_ablation

mode = reference_mode(0)

print("honest confidences (hypotheses until the first all-genuine pair):")
rows = run_ablation(mode, ["greedy", "confidence", "uniform"], [2000], n_instances=30, seed=100,
                    occlusion_rate=0.3, clutter_count=3, sigma=1.0, fit=False)
for r in rows:
    print(f"  {r.strategy:<10} median {r.median_hypotheses:g}")

print("\nadversarial confidences (clutter scores highest):")
rows = run_ablation(mode, ["uniform", "greedy"], [500, 2000], n_instances=10, seed=200,
                    occlusion_rate=0.3, clutter_count=3, sigma=1.0, adversarial=True)
print(ablation_csv(rows))
