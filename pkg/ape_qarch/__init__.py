from ape import plugins


@plugins.register(plugins.Config)
def config_class():
    from .config import QarchConfig

    return QarchConfig


def __getattr__(name: str):
    if name == "FeedbackKernel":
        from .kernel import FeedbackKernel

        return FeedbackKernel

    elif name == "FamilySpec":
        from .kernel import FamilySpec

        return FamilySpec

    elif name == "CorrelationSet":
        from .correlators import CorrelationSet

        return CorrelationSet

    elif name == "QarchConfig":
        from .config import QarchConfig

        return QarchConfig

    elif name == "simulate_qarch":
        from .simulate import simulate_qarch

        return simulate_qarch

    elif name == "gmm_calibrate":
        from .estimate import gmm_calibrate

        return gmm_calibrate

    elif name == "one_step_ml":
        from .estimate import one_step_ml

        return one_step_ml

    else:
        raise AttributeError(name)


__all__ = [
    "CorrelationSet",
    "FamilySpec",
    "FeedbackKernel",
    "QarchConfig",
    "gmm_calibrate",
    "one_step_ml",
    "simulate_qarch",
]
