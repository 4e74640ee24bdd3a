"""GAN-balanced skin lesion classification with LIME and SHAP explanations."""


class SkinlabError(RuntimeError):
    """A library failure; ``code`` names the kind, e.g. ``StaleUpstream``."""

    def __init__(self, code, detail):
        super().__init__(f"{code}: {detail}")
        self.code = code
        self.detail = detail


from ._core import *  # noqa: E402,F401,F403
from ._core import Pipeline  # noqa: E402,F401
