#!/usr/bin/env python3
"""Rank candidate feature pairs by class separability over the season.

Evaluates the configured class trajectories (no scene generation needed) and
prints which 2D feature spaces carry a usable cluster arrangement, mirroring
the feature-space screening analysis.

Usage: python3 scripts/screen_pairs.py [corn_soy|rice_corn_soy] [year]
"""

import sys

import numpy as np

from croptopo.heatmap import screen_feature_pairs
from croptopo.synth import default_corn_soy_config, default_rice_corn_soy_config


def main() -> int:
    preset = sys.argv[1] if len(sys.argv) > 1 else "corn_soy"
    year = int(sys.argv[2]) if len(sys.argv) > 2 else 2017
    cfg, trajectories = (default_corn_soy_config() if preset == "corn_soy"
                         else default_rice_corn_soy_config())
    by = {t.name: t for t in trajectories}
    a, b = ("corn", "soybean")
    dates = list(cfg.step_doys)
    bands = by[a].band_names

    def stats(t):
        return {f: (np.array([t.mean_at(d, year)[bands.index(f)] for d in dates]),
                    np.array([t.std_at(d, year)[bands.index(f)] for d in dates]))
                for f in bands}

    ranked = screen_feature_pairs(dates, stats(by[a]), stats(by[b]))
    print(f"{a} vs {b}, year {year}:")
    print(f"{'pair':<14} {'best doy':>8} {'separability':>13}")
    for pair, doy, score in ranked:
        print(f"{pair:<14} {doy:>8} {score:>13.2f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
