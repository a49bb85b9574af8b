"""Hot inner loops: state-space recursion, Hankel stacking, closed-loop MPC.

Each kernel has a numba version and a pure-numpy version with identical
semantics. The public wrappers pick one according to
:func:`commtopo._accel.use_numba`.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._accel import njit, use_numba

# ---------------------------------------------------------------------------
# state-space recursion


@njit
def _simulate_nb(A, B, C, D, E, x0, u, v):
    T = u.shape[0]
    n = A.shape[0]
    p = C.shape[0]
    x = x0.copy()
    X = np.empty((T + 1, n))
    yc = np.empty((T, p))
    X[0] = x
    for k in range(T):
        yk = C @ x + D @ u[k]
        yc[k] = yk
        x = A @ x + B @ u[k] + E @ v[k]
        for r in range(n):
            if not np.isfinite(x[r]):
                return X, yc, k
        X[k + 1] = x
    return X, yc, -1


def _simulate_np(A, B, C, D, E, x0, u, v):
    T = u.shape[0]
    X = np.empty((T + 1, A.shape[0]))
    X[0] = x0
    Bu = u @ B.T + v @ E.T
    x = x0.copy()
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(T):
            x = A @ x + Bu[k]
            if not np.all(np.isfinite(x)):
                return X, X[:k + 1] @ C.T + u[:k + 1] @ D.T, k
            X[k + 1] = x
    yc = X[:T] @ C.T + u @ D.T
    return X, yc, -1


def simulate_lti(A, B, C, D, E, x0, u, v):
    """Run ``x+ = Ax + Bu + Ev``, ``y = Cx + Du`` for ``T = len(u)`` steps.

    Returns ``(X, y_clean, diverged_at)`` where ``X`` has ``T + 1`` rows and
    ``diverged_at`` is the first step producing a non-finite state, or -1.
    Rows of ``X``/``y_clean`` past a divergence are undefined.
    """
    args = [np.ascontiguousarray(a, dtype=np.float64) for a in (A, B, C, D, E, x0, u, v)]
    if use_numba():
        return _simulate_nb(*args)
    return _simulate_np(*args)


# ---------------------------------------------------------------------------
# Hankel stacking


@njit
def _hankel_nb(x, L):
    T, n = x.shape
    cols = T - L + 1
    H = np.empty((n * L, cols))
    for t in range(cols):
        for r in range(L):
            for c in range(n):
                H[r * n + c, t] = x[t + r, c]
    return H


def _hankel_np(x, L):
    # windows: (cols, n, L) -> (cols, L, n) -> flatten time-major
    w = sliding_window_view(x, L, axis=0)
    return np.ascontiguousarray(w.transpose(0, 2, 1).reshape(w.shape[0], -1).T)


def hankel_matrix(x, L):
    x = np.ascontiguousarray(x, dtype=np.float64)
    if use_numba():
        return _hankel_nb(x, L)
    return _hankel_np(x, L)


# ---------------------------------------------------------------------------
# closed-loop non-cooperative MPC
#
# Layout arrays (all int64, one entry per agent):
#   yrow  (M, 2)  rows of K / Q belonging to agent i
#   up, yp, uf (M, 2)  columns of K for agent j's past input / past output /
#                      future input blocks
#   uch, ych (M, 2)    channel ranges of agent j in the global u / y vectors
#   ufrow (M, 2)       rows of the stacked future-input plan vector (m_j * N)


@njit
def _agent_solve_nb(G, b, Q, R, lam):
    nu = G.shape[1]
    ny = G.shape[0]
    H = np.zeros((nu + ny, nu + ny))
    QG = Q @ G
    H[:nu, :nu] = G.T @ QG + R
    H[:nu, nu:] = QG.T
    H[nu:, :nu] = QG
    H[nu:, nu:] = Q
    for r in range(ny):
        H[nu + r, nu + r] += lam
    g = np.empty(nu + ny)
    Qb = Q @ b
    g[:nu] = G.T @ Qb
    g[nu:] = Qb
    sol = np.linalg.solve(H, -g)
    grad = H @ sol + g
    return sol[:nu], sol[nu:], np.sqrt(np.sum(grad * grad))


@njit
def _closed_loop_nb(A, B, C, D, E, x0, V, K, topo, Qg, Rg, lam,
                    yrow, up, yp, uf, uch, ych, T_ini, N, T_sim):
    M = topo.shape[0]
    n = A.shape[0]
    m = B.shape[1]
    p = C.shape[0]
    T_tot = T_ini + T_sim
    X = np.zeros((T_tot + 1, n))
    U = np.zeros((T_tot, m))
    Yc = np.zeros((T_tot, p))
    Ym = np.zeros((T_tot, p))
    slack = np.zeros((T_sim, M))
    grad = np.zeros((T_sim, M))
    plans = np.zeros((N, m))
    shifted = np.zeros((N, m))
    x = x0.copy()
    X[0] = x
    diverged = -1
    for k in range(T_tot):
        if k >= T_ini:
            # neighbour plans communicated last step: shift one step, hold last
            for s in range(N - 1):
                shifted[s] = plans[s + 1]
            shifted[N - 1] = plans[N - 1]
            new_plans = np.zeros((N, m))
            for i in range(M):
                r0 = yrow[i, 0]
                r1 = yrow[i, 1]
                b = np.zeros(r1 - r0)
                for j in range(M):
                    if j != i and topo[i, j] == 0:
                        continue
                    mj = uch[j, 1] - uch[j, 0]
                    pj = ych[j, 1] - ych[j, 0]
                    for t in range(T_ini):
                        kk = k - T_ini + t
                        for c in range(mj):
                            b += K[r0:r1, up[j, 0] + t * mj + c] * U[kk, uch[j, 0] + c]
                        for c in range(pj):
                            b += K[r0:r1, yp[j, 0] + t * pj + c] * Ym[kk, ych[j, 0] + c]
                    if j != i:
                        for t in range(N):
                            for c in range(mj):
                                b += K[r0:r1, uf[j, 0] + t * mj + c] * shifted[t, uch[j, 0] + c]
                G = np.ascontiguousarray(K[r0:r1, uf[i, 0]:uf[i, 1]])
                mi = uch[i, 1] - uch[i, 0]
                Qi = np.ascontiguousarray(Qg[r0:r1, r0:r1])
                Ri = np.ascontiguousarray(Rg[uf[i, 0] - uf[0, 0]:uf[i, 1] - uf[0, 0],
                                             uf[i, 0] - uf[0, 0]:uf[i, 1] - uf[0, 0]])
                uopt, sopt, gnorm = _agent_solve_nb(G, b, Qi, Ri, lam)
                for t in range(N):
                    for c in range(mi):
                        new_plans[t, uch[i, 0] + c] = uopt[t * mi + c]
                slack[k - T_ini, i] = np.sqrt(np.sum(sopt * sopt))
                grad[k - T_ini, i] = gnorm
            plans = new_plans
            U[k] = plans[0]
        yk = C @ x + D @ U[k]
        Yc[k] = yk
        Ym[k] = yk + V[k]
        x = A @ x + B @ U[k] + E @ V[k]
        ok = True
        for r in range(n):
            if not np.isfinite(x[r]):
                ok = False
        if not ok:
            diverged = k
            break
        X[k + 1] = x
    return X, U, Yc, Ym, slack, grad, diverged


def _agent_solve_np(G, b, Q, R, lam):
    nu = G.shape[1]
    QG = Q @ G
    H = np.block([[G.T @ QG + R, QG.T], [QG, Q + lam * np.eye(len(b))]])
    g = np.concatenate([G.T @ (Q @ b), Q @ b])
    sol = np.linalg.solve(H, -g)
    return sol[:nu], sol[nu:], float(np.linalg.norm(H @ sol + g))


def _closed_loop_np(A, B, C, D, E, x0, V, K, topo, Qg, Rg, lam,
                    yrow, up, yp, uf, uch, ych, T_ini, N, T_sim, audit=None):
    M = topo.shape[0]
    T_tot = T_ini + T_sim
    m, p = B.shape[1], C.shape[0]
    X = np.zeros((T_tot + 1, A.shape[0]))
    U = np.zeros((T_tot, m))
    Yc = np.zeros((T_tot, p))
    Ym = np.zeros((T_tot, p))
    slack = np.zeros((T_sim, M))
    grad = np.zeros((T_sim, M))
    plans = np.zeros((N, m))
    x = x0.copy()
    X[0] = x
    diverged = -1
    f0 = uf[0, 0]
    for k in range(T_tot):
        if k >= T_ini:
            shifted = np.vstack([plans[1:], plans[-1:]])
            new_plans = np.zeros((N, m))
            for i in range(M):
                rows = slice(yrow[i, 0], yrow[i, 1])
                sources = [i] + [j for j in range(M) if j != i and topo[i, j]]
                if audit is not None:
                    audit[i].update(sources)
                b = np.zeros(yrow[i, 1] - yrow[i, 0])
                for j in sources:
                    us, ys = slice(*uch[j]), slice(*ych[j])
                    b += K[rows, up[j, 0]:up[j, 1]] @ U[k - T_ini:k, us].ravel()
                    b += K[rows, yp[j, 0]:yp[j, 1]] @ Ym[k - T_ini:k, ys].ravel()
                    if j != i:
                        b += K[rows, uf[j, 0]:uf[j, 1]] @ shifted[:, us].ravel()
                G = K[rows, uf[i, 0]:uf[i, 1]]
                rr = slice(uf[i, 0] - f0, uf[i, 1] - f0)
                uopt, sopt, gnorm = _agent_solve_np(G, b, Qg[rows, rows], Rg[rr, rr], lam)
                new_plans[:, slice(*uch[i])] = uopt.reshape(N, -1)
                slack[k - T_ini, i] = np.linalg.norm(sopt)
                grad[k - T_ini, i] = gnorm
            plans = new_plans
            U[k] = plans[0]
        Yc[k] = C @ x + D @ U[k]
        Ym[k] = Yc[k] + V[k]
        with np.errstate(over="ignore", invalid="ignore"):
            x = A @ x + B @ U[k] + E @ V[k]
        if not np.all(np.isfinite(x)):
            diverged = k
            break
        X[k + 1] = x
    return X, U, Yc, Ym, slack, grad, diverged


def closed_loop(A, B, C, D, E, x0, V, K, topo, Qg, Rg, lam, layout,
                T_ini, N, T_sim, audit=None):
    """Simulate the non-cooperative MPC loop; see :func:`commtopo.control.run_mpc`.

    ``audit`` (a list of sets, one per agent) records which agents' data each
    local solve consumed; passing it forces the numpy path.
    """
    f = lambda a: np.ascontiguousarray(a, dtype=np.float64)
    ints = [np.ascontiguousarray(layout[key], dtype=np.int64)
            for key in ("yrow", "up", "yp", "uf", "uch", "ych")]
    args = (f(A), f(B), f(C), f(D), f(E), f(x0), f(V), f(K),
            np.ascontiguousarray(topo, dtype=np.int64), f(Qg), f(Rg), float(lam),
            *ints, int(T_ini), int(N), int(T_sim))
    if use_numba() and audit is None:
        return _closed_loop_nb(*args)
    return _closed_loop_np(*args, audit=audit)
