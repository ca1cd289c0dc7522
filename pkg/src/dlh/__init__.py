"""dlh: a hierarchical latent-variable video model where every level decides,
at every step, whether its state stays put or changes.

The package is organised as a small library plus a command line front end:

- ``distributions``: numerically safe Gaussian / Bernoulli primitives
- ``mixture``: the two-component temporal prior and the selection rule
- ``networks``: the function approximators (frame codec, heads, recurrences)
- ``engine``: filtering, initial-state inference and open-loop rollout
- ``elbo``: loss assembly, beta schedule and the training loop
- ``moving_ball``: the procedural bouncing-ball dataset
- ``evaluation``: metrics, reports and ablations
- ``figures``: matplotlib rendering of reports
- ``config`` / ``cli``: INI run configuration and the ``dlh`` entry point
"""

__version__ = "0.1.0"
