"""Write a synthetic state-year panel for the example configs.

The panel follows a second-order autoregressive rate model with one
staggered policy and per-unit populations, so ``configs/analysis.yaml`` runs
end to end without external data.

Usage: python scripts/make_example_data.py [--out data/panel.csv] [--seed 3]
"""

import argparse
from pathlib import Path

import numpy as np

from dampanel.model import DamParams, ModelSpec
from dampanel.panel import write_csv
from dampanel.sim import generate_dam_panel

SCHEMA = {"unit": "state", "time": "year", "outcome": "deaths", "population": "pop", "policy:treat": "law"}


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default="data/panel.csv")
    parser.add_argument("--seed", type=int, default=3)
    parser.add_argument("--n-units", type=int, default=51)
    parser.add_argument("--n-periods", type=int, default=17)
    args = parser.parse_args()

    rng = np.random.default_rng(args.seed)
    spec = ModelSpec(k=2, l=2)
    # rates per 100,000
    params = DamParams(alpha=4.0, delta=[0.5, 0.2], theta=[[-1.5, -0.5, 0.2]], sigma2=1.0)
    panel, _ = generate_dam_panel(spec, params, args.n_units, args.n_periods, rng, start_window=(6, 13))
    pop = np.round(np.exp(rng.uniform(13, 16, size=(args.n_units, 1)))) * np.ones(panel.outcome.shape)
    counts = np.round(np.clip(panel.outcome, 0, None) * pop / 1e5)
    panel = panel.evolve(outcome=counts, population=pop / 1e5,
                         time_labels=tuple(range(2003, 2003 + args.n_periods)))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(panel, out, SCHEMA)
    print(f"wrote {out} ({panel.n_units} units x {panel.n_periods} periods)")


if __name__ == "__main__":
    main()
