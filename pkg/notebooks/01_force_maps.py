"""
From epochs to force maps
=========================

A participant's moderate-activity epochs become points (force,
derivative); a Gaussian KDE over a shared 25 x 25 grid turns them into a
matrix of probability weights, the observation that gets clustered.
"""

# %%
import numpy as np

from accelmix.forcemap import (
    build_force_map, global_bounds, logit_transform, normal_scale_bandwidth, numeric_derivative,
)
from accelmix.ingest import filter_by_activity
from accelmix.pipeline import emit_contour
from accelmix.synthetic import generate_synthetic, three_cluster_activity_spec

cohort = generate_synthetic(three_cluster_activity_spec(n_per=5, seed=0))
series = cohort.observations[0]
print(series.participant_id, len(series), "epochs", series.counts())

# %%
# Derivatives are only taken between neighbouring epochs of one bout,
# so each gap in the filtered series starts a new segment.
moderate = filter_by_activity(series, "moderate")
pts = numeric_derivative(moderate)
print(len(moderate.segments), "segments,", pts.T, "derivative points")
print("first points (f, f'):\n", pts.points[:3])

# %%
# All participants share one grid so their maps are comparable.
all_pts = [numeric_derivative(filter_by_activity(s, "moderate")) for s in cohort.observations]
grid = global_bounds(all_pts)
print("grid f in [%.1f, %.1f] mg, f' in [%.2f, %.2f] mg/s" % (grid.f_min, grid.f_max,
                                                                grid.d_min, grid.d_max))

H = normal_scale_bandwidth(pts)
fmap = build_force_map(pts, grid, H)
print("H =\n", H.round(3))
print("weights sum to", fmap.weights.sum(), "captured KDE mass %.3f" % fmap.captured_mass)

# %%
# Cells far from the data sit on the 1e-10 floor; the logit puts every
# map on the real line.
Y = logit_transform(fmap)
print("floored cells:", int(np.sum(fmap.weights < 1.01e-10)), "of", fmap.weights.size)
print("logit range: %.1f .. %.1f" % (Y.min(), Y.max()))

# %%
emit_contour(fmap, "force_map_contour.csv")
print("wrote force_map_contour.csv (f, f', weight triples)")
