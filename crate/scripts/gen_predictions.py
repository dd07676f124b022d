#!/usr/bin/env python3
"""Write the crafted predictions fixture used by the metric tests.

Blocks (truth -> predicted, count):
  Login -> Login              6   Login TP
  Login -> None               2   Login FN
  None  -> Login              1   Login FP
  ResponseDataLimit -> same   3   RDL TP
  ResponseDataLimit -> None   1   RDL FN
  None  -> ResponseDataLimit  2   RDL FP
  None  -> None              25

Hand-computed: Login FP=1 TN=31 -> FPR 1/32 = 3.125%, TPR 6/8 = 75%.
ResponseDataLimit FP=2 TN=34 -> FPR 2/36, TPR 3/4. Exact matches 34/40.
"""

import json
from pathlib import Path

BLOCKS = [
    (["Login"], ["Login"], 6),
    (["Login"], ["None"], 2),
    (["None"], ["Login"], 1),
    (["ResponseDataLimit"], ["ResponseDataLimit"], 3),
    (["ResponseDataLimit"], ["None"], 1),
    (["None"], ["ResponseDataLimit"], 2),
    (["None"], ["None"], 25),
]

out = Path(__file__).resolve().parent.parent / "crates" / "core" / "fixtures" / "predictions.jsonl"
with open(out, "w") as f:
    for truth, pred, n in BLOCKS:
        for _ in range(n):
            f.write(json.dumps({"truth": truth, "predicted": pred}, separators=(",", ":")) + "\n")
print(sum(n for _, _, n in BLOCKS), "records")
