"""Random cell placement and rasterization onto the solver/network grid."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fields import GridSpec, Layout, PackConfig, ScalarField


class PlacementError(RuntimeError):
    """Cell placement exhausted its rejection budget."""


class DomainMismatchError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class BatteryMask:
    spec: GridSpec
    flags: np.ndarray

    def __post_init__(self):
        f = np.array(self.flags, dtype=bool, copy=True)
        if f.shape != self.spec.shape:
            raise ValueError(f"mask shape {f.shape} does not match grid {self.spec.shape}")
        f.flags.writeable = False
        object.__setattr__(self, "flags", f)

    def __eq__(self, other):
        if not isinstance(other, BatteryMask):
            return NotImplemented
        return self.spec == other.spec and np.array_equal(self.flags, other.flags)

    __hash__ = None

    @property
    def count(self) -> int:
        return int(self.flags.sum())


def generate_layout(seed: int, n_cells: int = 8, geometry: Layout | None = None,
                    budget: int = 10_000, stall: int = 100) -> Layout:
    """Place ``n_cells`` cells by sequential rejection sampling.

    Each candidate is drawn uniformly from the box of admissible centres and
    rejected if it violates a clearance. After ``stall`` consecutive rejections
    the partial layout is discarded and placement starts over; 8 cells in the
    84 mm pack sit close to the random-packing jamming limit, so a partial
    layout can otherwise become unextendable. ``budget`` caps the total number
    of rejections across restarts.
    """
    geo = geometry if geometry is not None else Layout()
    if n_cells < 0:
        raise ValueError("n_cells must be non-negative")
    rng = np.random.default_rng(seed)
    w, hgt = geo.domain_mm
    margin = geo.diameter_mm / 2 + geo.gap_wall_mm
    lo = np.array([margin, margin])
    hi = np.array([w - margin, hgt - margin])
    if np.any(hi < lo) and n_cells > 0:
        raise PlacementError("cell does not fit between the walls")
    pitch = geo.diameter_mm + geo.gap_cell_mm

    centers: list[tuple[float, float]] = []
    rejected = streak = 0
    pitch2 = pitch * pitch
    draws = iter(())
    while len(centers) < n_cells:
        cand = next(draws, None)
        if cand is None:
            draws = iter(rng.uniform(lo, hi, size=(256, 2)).tolist())
            continue
        cx, cy = cand
        if all((cx - px) ** 2 + (cy - py) ** 2 >= pitch2 for px, py in centers):
            centers.append((cx, cy))
            streak = 0
            continue
        rejected += 1
        streak += 1
        if rejected >= budget:
            raise PlacementError(
                f"could not place {n_cells} cells within the budget of {budget} rejections "
                f"(constraints infeasible or nearly so)")
        if streak >= stall:
            centers.clear()
            streak = 0
    layout = Layout(domain_mm=geo.domain_mm, diameter_mm=geo.diameter_mm,
                    gap_cell_mm=geo.gap_cell_mm, gap_wall_mm=geo.gap_wall_mm,
                    centers_mm=tuple(centers))
    layout.validate()
    return layout


def _check_domain(layout: Layout, grid: GridSpec) -> None:
    w, hgt = layout.domain_mm
    if abs(w * 1e-3 - grid.width) > 1e-9 or abs(hgt * 1e-3 - grid.height) > 1e-9:
        raise DomainMismatchError(
            f"layout domain {w}x{hgt} mm does not match grid {grid.width * 1e3:g}x"
            f"{grid.height * 1e3:g} mm")


def battery_mask(layout: Layout, grid: GridSpec) -> BatteryMask:
    """Pixels whose centre lies strictly inside some cell."""
    _check_domain(layout, grid)
    x, y = grid.pixel_centers()
    r = layout.diameter_mm * 1e-3 / 2
    inside = np.zeros(grid.shape, dtype=bool)
    for cx, cy in layout.centers_mm:
        inside |= (x - cx * 1e-3) ** 2 + (y - cy * 1e-3) ** 2 < r * r
    return BatteryMask(grid, inside)


def rasterize_conductivity(layout: Layout, grid: GridSpec, config: PackConfig) -> ScalarField:
    m = battery_mask(layout, grid)
    return ScalarField(grid, np.where(m.flags, config.lambda_b, config.lambda_c))


def rasterize_initial_intensity(layout: Layout, grid: GridSpec,
                                config: PackConfig) -> ScalarField:
    # coolant intensity depends on T, so it is left at zero here
    m = battery_mask(layout, grid)
    return ScalarField(grid, np.where(m.flags, config.phi_b, 0.0))


def mask_from_conductivity(lam: ScalarField, config: PackConfig) -> BatteryMask:
    """Recover the battery region from a rasterized conductivity map."""
    v = lam.values
    bat = np.abs(v - config.lambda_b) < 1e-9
    cool = np.abs(v - config.lambda_c) < 1e-9
    if not np.all(bat | cool):
        raise ValueError("conductivity field holds values other than lambda_b / lambda_c")
    return BatteryMask(lam.spec, bat)
