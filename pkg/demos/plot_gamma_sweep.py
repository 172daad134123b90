"""
Sweeping the velocity decay
===========================

The orthogonal part of the velocity, relative to the average direction
travelled so far, is scaled by ``gamma``.  This sweep runs the easy
benchmark jobs at several values and prints the aggregate metrics.
"""

from flowguide.fields import OracleField
from flowguide.pipeline import EASY_SOURCES, ablate, standard_benchmark

dataset, jobs = standard_benchmark(sources=EASY_SOURCES)
rows, agg = ablate({"gamma": [0.0, 0.1, 0.5, 1.0]}, jobs, seeds=range(3), field=OracleField(dataset),
                   base=jobs[0].guidance)

print(f"{'gamma':>6} {'fidelity':>9} {'diff sim':>9} {'appearance':>11}")
for a in agg:
    print(f"{a['gamma']:6.2f} {a['motion_fidelity_mean']:9.3f} {a['diff_similarity_mean']:9.3f} "
          f"{a['appearance_score_mean']:11.4f}")
print(sum(r["status"] != "ok" for r in rows), "failed rows")
