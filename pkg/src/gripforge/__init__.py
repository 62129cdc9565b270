"""gripforge: grip-force prediction from surface EMG.

Pipeline: causal band-pass + notch filtering, corpus-wide min-max
normalization, sliding-window dataset construction, four small neural
networks (MLP, simple RNN, LSTM, GRU) trained from scratch with Adam on
an MSE loss, and an evaluation harness that sweeps prediction horizons.
"""

__version__ = "0.1.0"
