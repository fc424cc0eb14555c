import os
import sys

from hypothesis import HealthCheck, Phase, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow],
    derandomize=True, phases=[p for p in Phase if p is not Phase.explain],
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))
