"""Query-conditioned time-frequency source separation trained with
reinforcement learning against multimodal embedding rewards.

Subpackage map:

- ``spectral``   waveform <-> spectrogram conversion, masking, reconstruction
- ``wavio``      WAV file reader/writer with a sample-rate policy
- ``special``    log-gamma / digamma / trigamma numerics
- ``policy``     factorized Beta mask distribution (sampling, log-density,
                 entropy, KL, gradients)
- ``separator``  trainable mask-proposal network with exact gradients
- ``optim``      AdamW with global-norm gradient clipping
- ``rl``         clipped trust-region policy optimization loop
- ``reward``     cosine rewards, query mixup, low-rank bilinear query pooling
- ``embed``      embedding stores, synthetic oracle embedders, projection heads
- ``align``      three-stage contrastive alignment curriculum
- ``metrics``    SI-SDR / SI-SDRi, permutation assignment, SDR/SIR/SAR
- ``synthdata``  seeded synthetic dataset generation
- ``pipeline``   dataset loading and item preparation for training/eval
- ``cli``        command-line entry points
"""

__version__ = "0.1.0"
