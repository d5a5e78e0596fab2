"""Static versus adaptive partitioning under a shrinking hotspot.

Both runs see the same stream: tiny standing range queries and a flood
of objects, all packed into the lower-left corner of the space (the
live fraction of each axis is sf). The static run keeps the even
four-way carve it started with, so the partition covering the hotspot
does almost all the work. The adaptive run watches per-evaluator cost
between stats rounds and moves cell regions (edge shifts, corner
shifts, splits) until the load evens out. The imbalance number printed
per stats round is alpha, max cost over mean cost.
"""

import random

from skystream.model import ContinuousQuery, Point, Predicate, SpatialKeywordObject
from skystream.runtime import System, SystemConfig
from skystream.workload import scale_object, scale_query, square_mbr

FOREVER = 2**31
SF = 0.5
QUERIES = 5_000
OBJECTS = 80_000


def stream(sf):
    rng = random.Random(21)
    queries = []
    for qid in range(QUERIES):
        center = Point(rng.random(), rng.random())
        q = ContinuousQuery(qid, square_mbr(center, 0.002), frozenset(),
                            Predicate.INSIDE, FOREVER)
        queries.append(scale_query(q, sf))
    text = frozenset({"ping"})
    objects = [scale_object(
        SpatialKeywordObject(oid, Point(rng.random(), rng.random()), text, 0),
        sf) for oid in range(OBJECTS)]
    return queries, objects


def run(adaptive):
    cfg = SystemConfig(grid_n=128, grid_m=128, routers=2, evaluators=4,
                       beta=1.0, seed=21, stats_cadence=20_000,
                       adaptive=adaptive, mode="agrid",
                       clean_interval=4096, retain_results=False)
    s = System(cfg)
    queries, objects = stream(SF)
    for q in queries:
        s.ingest_query(q)
    s.drain()
    for i, o in enumerate(objects, 1):
        s.ingest_object(o)
        if i % 1000 == 0:
            s.drain()
    s.drain()
    return s


def main():
    for adaptive in (False, True):
        s = run(adaptive)
        label = "adaptive" if adaptive else "static"
        print(f"\n{label} run, hotspot sf={SF}")
        print("  alpha per stats round: "
              + " ".join(f"{row['alpha']:.2f}" for row in s.metrics))
        if s.decisions:
            print("  rebalance decisions:")
            for d in s.decisions:
                print(f"    tick {d['tick']:>7}: {d['opKind']:<12} "
                      f"partitions {d['pids']}  Cr={d['Cr']:.0f} Ct={d['Ct']:.0f}")
        else:
            print("  rebalance decisions: none")


if __name__ == "__main__":
    main()
