"""
From intersections to a road-segment graph
==========================================

A street map is usually stored with intersections as nodes. To classify
roads we flip it around: every directed segment becomes a node, and two
segments are linked when one ends where the other begins.
"""

import numpy as np

from roadgnn.graph import PrimalGraph, Segment, SplitSpec, neighbors, split_nodes, to_dual

# a T-junction: a two-way primary road with a one-way residential spur
inter = {"W": (104.060, 30.660), "J": (104.061, 30.660), "E": (104.062, 30.660),
         "S": (104.061, 30.659)}
segments = (
    Segment("W", "J", 0, {"highway": "primary"}),
    Segment("J", "W", 0, {"highway": "primary"}),
    Segment("J", "E", 0, {"highway": "primary"}),
    Segment("E", "J", 0, {"highway": "primary"}),
    Segment("J", "S", 0, {"highway": "residential", "oneway": True}),
)
primal = PrimalGraph(inter, segments)

###############################################################################
# U-turns (W->J followed by J->W) are kept by default and can be dropped.

for policy in ("include", "exclude"):
    g = to_dual(primal, policy)
    print(f"{policy:>8}: {g.num_nodes} nodes, {g.num_edges} edges")

g = to_dual(primal)
for i, node in enumerate(g.node_ids):
    print(f"{node:>6} -> {[g.node_ids[j] for j in neighbors(g, i, 'out')]}")

###############################################################################
# Labels come from the ``highway`` tag; splits only touch labelled nodes.

g = split_nodes(g, SplitSpec(seed=0, val=1, test=1))
print("labels:", [g.classes[k] for k in g.labels])
print("splits:", g.split_counts())
print("node hashes:", np.array2string(g.node_hashes[:2]))
