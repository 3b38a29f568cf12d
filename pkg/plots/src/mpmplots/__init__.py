"""Charts for mpmbench timing CSVs: ablation bars and scaling curves."""

from .ablation import AblationSeries, build_ablation_series, plot_ablation
from .efficiency import EfficiencyCurve, build_efficiency_curves, \
    plot_efficiency
from .io import PairingError, SchemaMismatchError, TimingTable, \
    load_timing_csv

__all__ = [
    "AblationSeries", "build_ablation_series", "plot_ablation",
    "EfficiencyCurve", "build_efficiency_curves", "plot_efficiency",
    "PairingError", "SchemaMismatchError", "TimingTable", "load_timing_csv",
]

__version__ = "0.1.0"
