"""Run every experiment preset with its defaults into ``<out>/<preset>/``.

    python scripts/run_all_presets.py [out_dir]

The wavepacket preset is run with the Verlet oracle switched on.
"""

import sys
import time
from pathlib import Path

from lattice_tdse.experiments import PRESETS, run_preset


def main(out="runs"):
    root = Path(out)
    for name in PRESETS:
        t0 = time.perf_counter()
        overrides = {"oracle": True} if name == "nnn-wavepacket" else None
        res = run_preset(name, overrides=overrides, out_dir=root / name)
        s = res.summary
        bits = [f"{k}={s[k]:.3g}" for k in ("max_norm_deviation", "max_energy_deviation",
                                            "max_budget_deviation") if k in s]
        if "oracle" in s:
            bits.append(f"oracle={s['oracle']['max_relative_velocity_error']:.3g}")
        if "strictly_spreading" in s:
            bits.append(f"spreading={s['strictly_spreading']}")
        if "rows" in s:
            bits.append(f"rows={len(s['rows'])}")
        print(f"{name:<18} seed={res.seed:<5} {time.perf_counter() - t0:6.1f}s  " + " ".join(bits))


if __name__ == "__main__":
    main(*sys.argv[1:2])
