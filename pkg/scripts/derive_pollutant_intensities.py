"""Derive pollutant emission intensities (short tons per MWh) from regional permit limits.

Actual emissions are assumed to be a fixed fraction of permitted annual limits,
spread over the region's annual data center electricity use. Prints a YAML
block for the ``project.pollutant_intensities`` config key.

    python scripts/derive_pollutant_intensities.py --regional-energy-mwh 26000000
"""

import argparse

from communitypoll.impact import derive_pollutant_intensities

# Permitted annual limits for Northern Virginia data center generators, short tons.
PERMITS_ST = {"NOx": 13_000, "VOCs": 1_400, "PM2.5": 600, "SO2": 50}


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    # PLACEHOLDER default: replace with the sourced regional total.
    parser.add_argument("--regional-energy-mwh", type=float, default=26_000_000)
    parser.add_argument("--actual-fraction", type=float, default=0.10)
    args = parser.parse_args(argv)
    intensities = derive_pollutant_intensities(PERMITS_ST, args.regional_energy_mwh, args.actual_fraction)
    print("pollutant_intensities:")
    for name, value in intensities.items():
        print(f"  {name}: {value!r}")


if __name__ == "__main__":
    main()
