"""Deep Q-learning autofocus on synthetic focal stacks.

The package covers the full pipeline: rendering synthetic scenes and
blurring them into focal stacks (`focusrl.imaging`), scoring sharpness
(`focusrl.focus`), an episodic focus-control environment (`focusrl.env`),
a from-scratch convolutional Q-network (`focusrl.net`), DQN training and
evaluation (`focusrl.agent`), exact and heuristic reference solvers
(`focusrl.baselines`), and a command line front end (`focusrl.cli`).
"""

from focusrl.env import Action, AutofocusEnv, EnvConfig, EpisodeOutcome
from focusrl.imaging import FocalStack, Image, Scene

__version__ = "0.1.0"

__all__ = [
    "Action",
    "AutofocusEnv",
    "EnvConfig",
    "EpisodeOutcome",
    "FocalStack",
    "Image",
    "Scene",
    "__version__",
]
