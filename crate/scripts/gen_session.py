#!/usr/bin/env python3
"""Write a 500-request session over corpus requests for replay tests.

Background traffic is drawn at random from the corpus. Scripted bursts are
mixed in so that the replay produces denials: repeated purchases of one
product, repeated logins from one address and registration sprees.
Every request is a verbatim corpus request, so the recorded transcripts
cover it.
"""

import json
import random
from pathlib import Path

SEED = 7
N = 500
T0 = 1_700_000_000_000
PEERS = ["198.51.100.%d" % i for i in range(1, 7)]

root = Path(__file__).resolve().parent.parent / "crates" / "core" / "fixtures"
corpus = [json.loads(l) for l in open(root / "corpus.jsonl")]
by_template = {}
for r in corpus:
    by_template.setdefault(r["template"], []).append(r)

rng = random.Random(SEED)


def burst(template, k, peer):
    rec = rng.choice(by_template[template])
    return [(rec["raw"], peer)] * k


bursts = [
    burst("orders_nested", 3, PEERS[0]),
    burst("cart_add", 4, PEERS[1]),
    burst("bank_login", 8, PEERS[2]),
    burst("signin_json", 7, PEERS[3]),
    burst("shop_register", 5, PEERS[4]),
    burst("post_comment", 12, PEERS[5]),
    burst("checkout_json", 5, PEERS[1]),
]
scripted = sum(len(b) for b in bursts)
starts = sorted(rng.sample(range(N - scripted), len(bursts)))

out = []
bi = 0
while len(out) < N:
    if bi < len(bursts) and len([o for o in out if not o[2]]) >= starts[bi]:
        out.extend((raw, peer, True) for raw, peer in bursts[bi])
        bi += 1
        continue
    rec = rng.choice(corpus)
    out.append((rec["raw"], rng.choice(PEERS), False))
out = out[:N]

ts = T0
with open(root / "session_500.jsonl", "w") as f:
    for raw, peer, scripted_req in out:
        ts += rng.randint(200, 1500) if scripted_req else rng.randint(100, 4000)
        f.write(json.dumps({"ts": ts, "peer": peer, "raw": raw}, separators=(",", ":")) + "\n")
print(len(out), "requests")
