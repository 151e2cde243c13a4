"""Independent generator for the collision-histogram regression fixture.

Default configuration (L=16, N=8, T=2^19, N_min=16, N_max=1024), probe lattice
of resolution 64. Capacities and resolutions are recomputed here from their
definitions; the hash is the big-integer oracle.

    python tests/oracles/collision_oracle.py > tests/fixtures/collision_probe64.json
"""

import collections
import itertools
import json

from hash_oracle import reference_hash
from reference_encoding import resolutions


def histogram(L=16, N=8, T=2**19, N_min=16, N_max=1024, R=64):
    res = resolutions(N_min, N_max, L)
    W = L // N
    rows = []
    for n in range(1, N + 1):
        finest = res[n * W - 1]
        cap = min(T, (finest + 1) ** 3)
        hits = collections.Counter()
        for c in itertools.product(range(R + 1), repeat=3):
            hits[reference_hash([v * finest // R for v in c], cap)] += 1
        per_count = collections.Counter(hits.values())
        per_count[0] = cap - len(hits)
        if not per_count[0]:
            del per_count[0]
        rows.append({"table": n, "capacity": cap, "histogram": {str(k): per_count[k] for k in sorted(per_count)}})
    return rows


if __name__ == "__main__":
    print(json.dumps(histogram(), indent=1))
