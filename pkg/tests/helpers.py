"""Small instance builders shared across test modules."""
import numpy as np

from fdtr.features import TabularFeatureMap
from fdtr.mdp import LinearMdpSpec


def point_mass_spec(n_states=4, action_count=2, H=3, reward=1.0, target=None):
    """Finite spec with one heterogeneous feature whose kernel sends every state to ``target``.

    With ``target=None`` the chain stays put. Rewards are deterministic and
    equal to ``reward`` everywhere.
    """
    S, A = n_states, action_count
    phi0 = np.zeros((S, A, 1))
    if target is None:
        phi1 = np.zeros((S, A, S))
        for s in range(S):
            phi1[s, :, s] = 1.0
        mu = np.broadcast_to(np.eye(S), (1, H, S, S)).copy()
        d1 = S
    else:
        phi1 = np.ones((S, A, 1))
        mu = np.zeros((1, H, 1, S))
        mu[..., target] = 1.0
        d1 = 1
    fmap = TabularFeatureMap(phi0, phi1)
    theta0 = np.zeros((H, 1))
    theta_site = np.full((1, H, d1), reward)
    return LinearMdpSpec("finite", 1, H, fmap, theta0, theta_site, mu, reward_noise_sd=0.0)
