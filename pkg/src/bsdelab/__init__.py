"""Monte-Carlo toolkit for BSDEs with psi-integrable terminal values.

Modules: ``psi`` (integrability weight), ``engine`` (Brownian ensembles),
``generators`` (drivers, terminals, hypothesis checkers), ``solver`` (LSMC
schemes), ``measure`` (Girsanov layer), ``harness`` (experiments) and ``cli``.
"""

__version__ = "0.1.0"
