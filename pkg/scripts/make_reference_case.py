"""Regenerate src/appf/data/case33.json from the tables in appf.cases."""

import json
from pathlib import Path

from appf.cases import assemble_reference_case, calibrate
from appf.grid import network_to_dict

NOTES = (
    "Baseline dispatch is a repository calibration: SG and load values were chosen so "
    "every tie carries 20-60 MW and each IBR (75.48 MW rating, 30 MW dispatch) keeps "
    "45 MW of active headroom. SG1 (bus 1) output and all SG reactive outputs come from "
    "the baseline Newton power flow. Machine constants follow the WSCC 9-bus set; "
    "damping, droop, governor and AVR constants are calibration values. Units: p.u. on 100 MVA."
)


def main():
    net = calibrate(assemble_reference_case())
    data = {"notes": NOTES, **network_to_dict(net)}
    out = Path(__file__).resolve().parents[1] / "src" / "appf" / "data" / "case33.json"
    out.write_text(json.dumps(data, indent=1) + "\n")
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
