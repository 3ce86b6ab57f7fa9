"""Write Taylor County, TX (48/441) ACS fixture payloads into the package cache.

The values are hand-assembled, internally consistent estimates in the shape
the ACS Data Profile API returns (array of rows, string values, trailing
state/county columns). They stand in for recorded responses in offline runs
and tests; replace them by running `communitypoll ingest` with
CENSUS_API_KEY set and copying the cache files over.
"""

import json
from pathlib import Path

from communitypoll.census import (
    AGENT_VARIABLE_SETS,
    PROFILE_CODES,
    PROFILE_EDUCATION_CODES,
    PROFILE_INDUSTRY_CODES,
    profile_code_list,
    request_key,
)

STATE, COUNTY, YEAR = "48", "441", 2023
OUT = Path(__file__).resolve().parents[1] / "src" / "communitypoll" / "data" / "fixtures" / "acs"

AGE = [9400, 9300, 9500, 11900, 13000, 20600, 18100, 15300, 7600, 7900, 12100, 6600, 2466]
ATTAINMENT = [3300, 5900, 25700, 22600, 7900, 16700, 8566]
INDUSTRIES = [1900, 4800, 3300, 1200, 7700, 3200, 900, 3500, 4900, 16200, 7000, 3300, 4100]

VALUES = {}
VALUES.update(zip([f"DP05_{i:04d}E" for i in range(5, 18)], AGE))
VALUES.update({"DP05_0001E": 143766, "DP05_0002E": 71300, "DP05_0003E": 72466, "DP05_0018E": "33.6"})
VALUES.update(zip(["DP05_0037E", "DP05_0038E", "DP05_0039E", "DP05_0045E", "DP05_0046E", "DP05_0047E",
                   "DP05_0048E", "DP05_0049E", "DP05_0050E", "DP05_0051E", "DP05_0052E", "DP05_0057E",
                   "DP05_0058E"],
                  [104500, 11300, 900, 900, 350, 400, 80, 150, 300, 420, 120, 7800, 16546]))
VALUES.update(zip([f"DP05_{i:04d}E" for i in range(69, 75)], [112000, 13600, 2900, 3500, 300, 18000]))
VALUES.update({"DP05_0076E": 36100, "DP05_0081E": 107666})
VALUES.update(zip(["DP02_0091E", "DP02_0092E", "DP02_0093E", "DP02_0096E", "DP02_0097E"],
                  [98000, 36500, 1900, 3100, 4266]))
VALUES.update(zip(["DP02_0113E", "DP02_0116E", "DP02_0118E", "DP02_0120E", "DP02_0122E"],
                  [113000, 18200, 1600, 1100, 466]))
VALUES.update(zip([f"DP02_{i:04d}E" for i in range(26, 31)], [20100, 27300, 1000, 1600, 6000]))
VALUES.update(zip([f"DP02_{i:04d}E" for i in range(32, 37)], [17300, 26700, 1500, 5800, 7200]))
VALUES.update(zip(PROFILE_EDUCATION_CODES, ATTAINMENT))
VALUES.update({"DP02_0058E": 9800, "DP02_0001E": 52800, "DP02_0016E": "2.51", "DP02_0153E": 48600})
VALUES.update(zip(PROFILE_INDUSTRY_CODES, INDUSTRIES))
VALUES.update({"DP03_0005E": 2900, "DP03_0006E": 3300, "DP03_0007E": 44800, "DP03_0008E": 64900,
               "DP03_0062E": 60300, "DP03_0088E": 31400})
VALUES.update(zip([f"DP03_{i:04d}E" for i in range(52, 62)],
                  [3700, 2600, 4900, 4800, 6700, 9300, 6900, 7600, 3000, 3300]))
VALUES.update(zip([f"DP04_{i:04d}E" for i in range(81, 89)], [2600, 4300, 5000, 5400, 7100, 4600, 1350, 250]))
VALUES.update(zip([f"DP04_{i:04d}E" for i in range(127, 134)], [1500, 9300, 7100, 2100, 500, 150, 150]))
VALUES.update({"DP04_0135E": 1400})
VALUES.update(zip([f"DP04_{i:04d}E" for i in range(58, 62)], [3300, 18300, 20100, 11100]))
VALUES.update({"DP04_0045E": 52800, "DP04_0046E": 30600, "DP04_0047E": 22200,
               "DP04_0089E": 172400, "DP04_0134E": 1020})


def payload(codes):
    header = list(codes) + ["state", "county"]
    row = [str(VALUES[c]) for c in codes] + [STATE, COUNTY]
    return json.dumps([header, row]).encode()


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    requests = [vs.variable_codes for vs in AGENT_VARIABLE_SETS] + [profile_code_list()]
    assert set(PROFILE_CODES.values()) <= VALUES.keys()
    for codes in requests:
        path = OUT / request_key(YEAR, STATE, COUNTY, codes)
        path.write_bytes(payload(codes))
        print(path.name)


if __name__ == "__main__":
    main()
