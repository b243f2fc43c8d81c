import hypothesis

# the sandboxed CI box is slow and single-core; wall-clock deadlines misfire
hypothesis.settings.register_profile(
    "suite", deadline=None, max_examples=40,
    suppress_health_check=[hypothesis.HealthCheck.too_slow])
hypothesis.settings.load_profile("suite")
