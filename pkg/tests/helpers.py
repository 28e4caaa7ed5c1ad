import numpy as np

from alsstrat.geo import Crs
from alsstrat.pointcloud import PointTile


def random_tile(n, seed=0, side=500.0, origin=(0.0, 0.0), point_format=6, ground_fraction=0.3, max_returns=None):
    """Uniform random returns over a square tile with well-formed return fields."""
    rng = np.random.default_rng(seed)
    max_returns = max_returns or (5 if point_format != 6 else 7)
    x = np.round(origin[0] + rng.uniform(0, side, n), 3)
    y = np.round(origin[1] + rng.uniform(0, side, n), 3)
    z = np.round(rng.normal(100, 15, n), 3)
    nr = rng.integers(1, max_returns + 1, n)
    rn = np.minimum(rng.integers(1, max_returns + 1, n), nr)
    cls = np.where(rng.random(n) < ground_fraction, 2, rng.choice([1, 3, 4, 5, 6], n))
    return PointTile(
        x, y, z,
        classification=cls, return_number=rn, number_of_returns=nr,
        intensity=rng.integers(0, 65535, n),
        user_data=rng.integers(0, 255, n),
        point_source_id=rng.integers(0, 1000, n),
        gps_time=np.round(rng.uniform(0, 1e5, n), 6),
        bounds=(origin[0], origin[1], origin[0] + side, origin[1] + side),
        crs=Crs.utm(18), source_id=f"proj{seed}", capture_year=2019,
        point_format=point_format,
    )
