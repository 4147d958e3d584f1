"""Flow matching for discrete sequences along KL geodesics of the simplex.

Subpackage map:

- ``simplex``    geodesic interpolation, smoothing, velocities, noise draws
- ``model``      bidirectional transformer denoiser with hand-rolled backprop
- ``tabular``    histogram denoiser for oracle-scale instances
- ``checkpoint`` binary tensor container with a JSON manifest
- ``training``   denoising objective, Adam loop, metrics log
- ``inference``  the four generation schemes plus clamped conditioning
- ``oracle``     exact posteriors, quadrature cross-checks, exact-velocity ODE
- ``data``       byte/char vocab, corpus windows, Markov toy languages
- ``metrics``    entropy, reference perplexity, n-gram total variation
- ``cli``        train / generate / eval / oracle-check / sweep
"""

__version__ = "0.1.0"
