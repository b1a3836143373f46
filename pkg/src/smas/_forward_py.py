"""Pure numpy forward recursion over the expanded state space.

Vectorized across histories.  The structured transition is applied directly
(advance within an aggregate, exit to position 1 of another aggregate, die)
instead of multiplying dense ``a* x a*`` matrices; sightings are enforced by
the emission factors, which zero every state the transition masking would.
"""
import numpy as np

# symbol code -> emission table row: DEAD=-2 -> 0, UNKNOWN=-1 -> 1, UNSEEN=0 -> 2, k+1 -> k+2
_CODE_SHIFT = 2


def emission_tables(p, alpha, lam, sizes):
    """Per-occasion emission factors for live positions and the two dead states.

    Returns ``live`` with shape (T, K+3, n_live) and ``dead`` with shape (T, K+3, 2).
    """
    T, K = p.shape
    live_state = np.zeros((T, K + 3, K))
    dead = np.zeros((T, K + 3, 2))
    live_state[:, 1] = p * (1.0 - alpha)
    live_state[:, 2] = 1.0 - p
    for k in range(K):
        live_state[:, k + 3, k] = p[:, k] * alpha[:, k]
    dead[:, 0, 0] = lam
    dead[:, 2, 0] = 1.0 - lam
    dead[:, 2, 1] = 1.0
    live = np.repeat(live_state, sizes, axis=2)
    return live, dead


def forward_loglik(obs, first, init, sizes, stay, leave, phi, psi, p, alpha, lam):
    """Log-likelihood of each history (``-inf`` when impossible).

    obs : (M, T) int symbol codes; first : (M,) first-capture occasion;
    init : (M, n_live) initial live vectors; sizes : (K,) aggregate sizes;
    stay, leave : (n_live,) ``1 - c`` and ``c`` per position; phi : (T-1, K);
    psi : (T-1, K, K); p, alpha : (T, K); lam : (T,).
    """
    obs = np.asarray(obs)
    first = np.asarray(first)
    M, T = obs.shape
    sizes = np.asarray(sizes, dtype=np.int64)
    K = sizes.size
    n = int(sizes.sum())
    offsets = np.concatenate(([0], np.cumsum(sizes)[:-1]))
    last = offsets + sizes - 1
    state_pos = np.repeat(np.arange(K), sizes)
    is_last = np.zeros(n, dtype=bool)
    is_last[last] = True
    shift_src = np.flatnonzero(~is_last)
    agg_ind = np.zeros((n, K))
    agg_ind[np.arange(n), state_pos] = 1.0
    live_em, dead_em = emission_tables(p, alpha, lam, sizes)

    V = np.zeros((M, n))
    d1 = np.zeros(M)
    d2 = np.zeros(M)
    ll = np.zeros(M)
    failed = np.zeros(M, dtype=bool)
    for t in range(T - 1):
        start = first == t
        if start.any():
            V[start] = init[start]
        phi_pos = phi[t][state_pos]
        W = V * phi_pos
        dead_new = V @ (1.0 - phi_pos)
        S = W * stay
        new = np.zeros((M, n))
        new[:, shift_src + 1] = S[:, shift_src]
        new[:, last] += S[:, last]
        new[:, offsets] += ((W * leave) @ agg_ind) @ psi[t]
        d2 = d1 + d2
        d1 = dead_new
        code = obs[:, t + 1] + _CODE_SHIFT
        new *= live_em[t + 1][code]
        d1 = d1 * dead_em[t + 1, code, 0]
        d2 = d2 * dead_em[t + 1, code, 1]

        active = first <= t
        s = new.sum(axis=1) + d1 + d2
        zero = active & ~(s > 0)
        failed |= zero
        s = np.where(active & ~zero, s, 1.0)
        ll += np.where(active & ~zero, np.log(s), 0.0)
        V = new / s[:, None]
        d1 = d1 / s
        d2 = d2 / s
    return np.where(failed, -np.inf, ll)
