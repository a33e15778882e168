"""
Attributing a prediction to location and covariates
===================================================

GeoShapley treats the latitude and longitude columns as one joint player.
Each prediction splits into a base value, a location effect, one effect per
covariate and one location-by-covariate interaction per covariate.
"""

import numpy as np

from visitflow.geoshapley import (
    FeatureSchema,
    RidgePredictor,
    explain,
    geoshapley_exact,
    geoshapley_kernel,
    make_background,
    summarize_importance,
)

rng = np.random.default_rng(4)
n = 150
social = rng.uniform(size=(n, 6))
lat, lon = rng.uniform(30, 45, n), rng.uniform(-120, -80, n)
# Growth depends mostly on latitude, then on education, plus an interaction.
growth = 4 * (lat - 37.5) / 7.5 + social[:, 1] + 0.8 * (lat - 37.5) / 7.5 * social[:, 3]
growth += rng.normal(0, 0.05, n)

x = np.column_stack([social, lat, lon])
schema = FeatureSchema(["health", "education", "crime", "work", "economy", "housing", "lat", "lon"], geo=[6, 7])
model = RidgePredictor(alpha=0.1, interactions=True).fit(x, growth)
background = make_background(x, 60, seed=0)

d = geoshapley_exact(model, x[0], schema, background)
for name, value in d.components().items():
    print(f"{name:<18} {value:+.4f}")
# The parts add back up to the model output.
print("base + parts", round(d.total(), 10), "prediction", round(d.prediction, 10))

# %%
# Sampled estimate
# ----------------
# With many covariates the exact sum over coalitions grows as 2^q. The kernel
# estimator fits the same decomposition from a sample of coalitions.
approx = geoshapley_kernel(model, x[0], schema, background, samples=80, seed=1)
print("location effect: exact", round(d.phi_geo, 4), "sampled", round(approx.phi_geo, 4))

# %%
# Ranking
# -------
for row in summarize_importance(explain(model, x[:50], schema, background))[:5]:
    print(row.rank, row.component, round(row.mean_abs_value, 4))
