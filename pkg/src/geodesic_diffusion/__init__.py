"""Fisher-Rao geodesic noise schedules for diffusion models.

The package is organised as

* ``schedules``  closed-form geodesic schedules, boundary solving, baselines
* ``geometry``   Fisher-Rao speed, length, energy and momentum of a path
* ``engine``     forward perturbation, the epsilon objective, training
* ``mlp``        a small numpy noise predictor with Adam and checkpoints
* ``sampler``    deterministic Euler sampling with truncated initialisation
* ``testbed``    analytic Gaussian oracles and synthetic datasets
* ``metrics``    PSNR and SSIM
* ``cli``        the ``gdm`` command line
"""
from .errors import *  # noqa: F401,F403
from .schedules import *  # noqa: F401,F403
from .geometry import *  # noqa: F401,F403
from .mlp import *  # noqa: F401,F403
from .engine import *  # noqa: F401,F403
from .sampler import *  # noqa: F401,F403
from .testbed import *  # noqa: F401,F403
from .metrics import psnr, psnr_pm1, ssim, ssim_pm1  # noqa: F401
from .pgm import read_pgm, write_pgm  # noqa: F401

__version__ = "0.1.0"
