"""Dynamic state estimation for multi-machine power systems under attack.

Modules: ``powermodel`` (generator model), ``cases`` (shipped 3-machine
case), ``sim`` (truth simulation), ``noise_attacks``, ``filters`` (EKF, UKF,
SR-UKF, CKF), ``observer`` (one-sided Lipschitz observer), ``lmi``,
``detect_metrics``, ``scenario``, ``report`` and ``cli``.
"""
__version__ = "0.1.0"
