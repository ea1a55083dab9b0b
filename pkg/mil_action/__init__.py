"""
mil_action - Uncertainty-aware Multiple Instance Learning for weakly supervised
spatio-temporal action detection.

A desk-scale library and experiment CLI: bag aggregation, the
uncertainty-weighted loss, bag sampling, tubelet linking and Frame/Video AP
evaluation, run end to end on a configurable synthetic video world.
"""

__version__ = "1.0.0"
__author__ = "mil_action contributors"
