"""Spatiotemporal GAN data augmentation for multi-region demand forecasting."""
from .bench import BacktestPlan, MetricReport, backtest, persistence, sample_quality, seasonal_naive
from .data import SynthSpec, TimeSeriesPanel, WindowBatch, load_csv, make_windows, synth_panel
from .metrics import dtw, hurst, improvement_rate, mae, mape
from .predictor import Predictor, PredictorConfig, forecast
from .spatial import SpatialWeights, build_weights, normalize_weights, spatial_weights
from .stgan import GanConfig, GanState, gradient_penalty, init_gan
from .train import Checkpoint, ExperimentConfig, TrainConfig, load_checkpoint, save_checkpoint

__version__ = "0.1.0"
