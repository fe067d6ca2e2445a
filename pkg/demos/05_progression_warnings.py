"""Longitudinal risk warnings on three simulated follow-up scenarios.

A warning fires at the first visit whose fused risk reaches 0.5, or rises
by 0.10 over two visits. The stable eye should never fire; the slowly and
rapidly progressing eyes should, with the rapid one flagged no later than
the slow one.
"""

from oculogate.data import default_cohort_spec, generate_cohort, generate_trajectory
from oculogate.metrics import dynamic_warning
from oculogate.pipeline import deterministic_scores, run_training_pipeline
from oculogate.train import TrainConfig

cohort = generate_cohort(default_cohort_spec(n_patients=500, seed=2))
tp = run_training_pipeline(cohort, TrainConfig(max_epochs=12, seed=3))

for kind in ("stable", "slow", "rapid"):
    traj = generate_trajectory(kind, n_visits=8, seed=4)
    arrs = deterministic_scores(tp, traj.table)
    w = dynamic_warning(traj.table.visit_time, arrs["p_final"], traj.onset_time)

    print(f"\n{kind} case (latent -2 dB crossing: "
          f"{'never' if traj.onset_time is None else f'{traj.onset_time:.1f} yr'})")
    print("  t(yr)   md(dB)   risk")
    for t, md, p in zip(traj.table.visit_time, traj.table.md, arrs["p_final"]):
        mark = " <- warning" if w.fired and t == w.first_warning_time else ""
        print(f"  {t:5.1f}  {md:7.2f}  {p:.3f}{mark}")
    if w.fired:
        lead = ("n/a" if w.lead_time_months is None
                else f"{w.lead_time_months:+.0f} months vs onset")
        print(f"  fired at visit {w.first_warning_index} ({lead}); "
              f"delta risk {w.delta_risk:+.3f}, peak {w.peak_risk:.3f}")
    else:
        print(f"  never fired; delta risk {w.delta_risk:+.3f}, "
              f"peak {w.peak_risk:.3f}")
