"""Tour of grid routing: point lookups and stack-based range search.

Carves a 64x64 cell grid into rectangular partitions three different
ways, then routes points and range queries through each layout. The
point of interest is the op counts: a point lookup is one array probe
no matter how many partitions exist, and a range search pops a number
of cells proportional to the partitions it actually touches, not to
the cells the range covers.
"""

import random

from skystream.agrid import AGrid, uniform_partitioning
from skystream.model import Point, Rect


def carve_recursive(rng, n, m, parts):
    """Random guillotine partitioning: repeatedly split the widest rect."""
    rects = [(0, 0, n - 1, m - 1)]
    while len(rects) < parts:
        rects.sort(key=lambda r: (r[2] - r[0] + 1) * (r[3] - r[1] + 1))
        x1, y1, x2, y2 = rects.pop()
        if x2 - x1 >= y2 - y1 and x2 > x1:
            cut = rng.randint(x1, x2 - 1)
            rects += [(x1, y1, cut, y2), (cut + 1, y1, x2, y2)]
        elif y2 > y1:
            cut = rng.randint(y1, y2 - 1)
            rects += [(x1, y1, x2, cut), (x1, cut + 1, x2, y2)]
        else:
            rects.append((x1, y1, x2, y2))
            break
    return {pid: r for pid, r in enumerate(rects)}


def main():
    rng = random.Random(7)
    layouts = {
        "uniform 4": uniform_partitioning(64, 64, 4),
        "uniform 16": uniform_partitioning(64, 64, 16),
        "recursive 16": carve_recursive(rng, 64, 64, 16),
    }

    points = [Point(rng.random(), rng.random()) for _ in range(5)]
    box = Rect(0.20, 0.20, 0.55, 0.45)

    for name, pm in layouts.items():
        grid = AGrid(64, 64, pm)
        print(f"\n{name} ({len(pm)} partitions)")
        for p in points[:3]:
            print(f"  point ({p.x:.2f}, {p.y:.2f}) -> partition "
                  f"{grid.route_point(p)}")
        crange = grid.cell_range(box)
        owners, pops = grid.neighbor_search_cells(crange)
        ncells = (crange[2] - crange[0] + 1) * (crange[3] - crange[1] + 1)
        print(f"  range {box} covers {ncells} cells, "
              f"owned by partitions {sorted(owners)}")
        print(f"  search popped {pops} stack cells "
              f"(bound 2*{len(owners)}+1 = {2 * len(owners) + 1})")


if __name__ == "__main__":
    main()
