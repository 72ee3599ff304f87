#!/usr/bin/env python3
"""Writes the bundled 34-bus radial single-phase-equivalent feeder.

Topology and section lengths follow the public 34-node test feeder; the
per-unit impedances are a uniform per-length conductor scaled so that the
synthetic residential loads give a 0.93-0.97 pu end-of-feeder voltage.
"""
import argparse
import json

SECTIONS = [
    ("800", "802", 2580), ("802", "806", 1730), ("806", "808", 32230),
    ("808", "810", 5804), ("808", "812", 37500), ("812", "814", 29730),
    ("814", "850", 10), ("850", "816", 310), ("816", "818", 1710),
    ("818", "820", 48150), ("820", "822", 13740), ("816", "824", 10210),
    ("824", "826", 3030), ("824", "828", 840), ("828", "830", 20440),
    ("830", "854", 520), ("854", "856", 23330), ("854", "852", 36830),
    ("852", "832", 10), ("832", "888", None), ("888", "890", 10560),
    ("832", "858", 4900), ("858", "864", 1620), ("858", "834", 5830),
    ("834", "842", 280), ("842", "844", 1350), ("844", "846", 3640),
    ("846", "848", 530), ("834", "860", 2020), ("860", "836", 2680),
    ("836", "840", 860), ("836", "862", 280), ("862", "838", 4860),
]

def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="data/feeder34.json")
    ap.add_argument("--r-per-kft", type=float, default=0.0000375)
    ap.add_argument("--x-per-kft", type=float, default=0.00004875)
    ap.add_argument("--min-length", type=float, default=500.0)
    ap.add_argument("--transformer-x", type=float, default=0.01)
    args = ap.parse_args()

    buses = [{"id": "800", "substation": True}]
    lines = []
    for a, b, length in SECTIONS:
        buses.append({"id": b})
        if length is None:
            r, x = 0.2 * args.transformer_x, args.transformer_x
        else:
            kft = max(length, args.min_length) / 1000.0
            r, x = args.r_per_kft * kft, args.x_per_kft * kft
        lines.append({"from": a, "to": b, "r": round(r, 8), "x": round(x, 8)})
    with open(args.out, "w") as f:
        json.dump({"base_voltage": 1.0, "buses": buses, "lines": lines}, f, indent=1)
        f.write("\n")

if __name__ == "__main__":
    main()
