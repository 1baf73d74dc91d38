"""Activation-entropy confidence scores and entropy-guided unsupervised adaptation.

Modules
-------
features   gammatone filterbank features and context stacking
net        numpy DNN/CNN/TFCNN engine, training and adaptation
entropy    running-window activation entropy and the NRSE score
selection  score tables, ranking, pseudo-labels and the multi-pass loop
corpus     WAV/manifest IO, containers, corruption and the synthetic task
report     correlation tables and SVG figures
cli        command-line entry point
"""

__version__ = "0.1.0"
