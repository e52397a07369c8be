#!/usr/bin/env python3
# Copyright 2026 The pbcert Authors.
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     https://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.
"""Rebuilds data/spambase.csv from the KEEL copy shipped in the keel-ds wheel.

Usage: pip download --no-deps keel-ds -d /tmp/keel && \
       python3 tools/make_spambase_csv.py /tmp/keel/keel_ds-*.whl data/spambase.csv
"""
import csv
import sys
import zipfile

WORDS = [
    "make", "address", "all", "3d", "our", "over", "remove", "internet",
    "order", "mail", "receive", "will", "people", "report", "addresses",
    "free", "business", "email", "you", "credit", "your", "font", "000",
    "money", "hp", "hpl", "george", "650", "lab", "labs", "telnet", "857",
    "data", "415", "85", "technology", "1999", "parts", "pm", "direct", "cs",
    "meeting", "original", "project", "re", "edu", "table", "conference",
]
CHARS = ["semicolon", "paren", "bracket", "bang", "dollar", "hash"]
HEADER = ([f"word_freq_{w}" for w in WORDS] + [f"char_freq_{c}" for c in CHARS] +
          ["capital_run_length_average", "capital_run_length_longest",
           "capital_run_length_total", "class"])


def main(wheel, out):
    raw = zipfile.ZipFile(wheel).read("keel_ds/data/balanced/raw/spambase.dat").decode()
    rows = [[c.strip() for c in line.split(",")] for line in raw.splitlines()
            if line.strip() and not line.lstrip().startswith("@")]
    assert all(len(r) == len(HEADER) for r in rows)
    with open(out, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(HEADER)
        w.writerows(rows)
    print(f"wrote {len(rows)} rows to {out}")


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
