"""Dense brute-force references for the mixed-model machinery (small n only)."""
import numpy as np
import scipy.linalg

from spats.mixed import MixedModelDesign, RandomBlock


def random_design(n=30, seed=0, n_levels=5, dense_cols=4, with_covariate=True):
    """Intercept (+ covariate), one incidence block and one dense block with unequal precisions."""
    rng = np.random.default_rng(seed)
    x = [np.ones(n)]
    if with_covariate:
        x.append(rng.normal(size=n))
    x = np.column_stack(x)
    levels = np.arange(n) % n_levels
    rng.shuffle(levels)
    z1 = np.eye(n_levels)[levels]
    z2 = rng.normal(size=(n, dense_cols))
    prec2 = rng.uniform(0.5, 3.0, dense_cols)
    y = x @ rng.normal(size=x.shape[1]) + z1 @ rng.normal(size=n_levels) + \
        z2 @ (rng.normal(size=dense_cols) / np.sqrt(prec2)) + rng.normal(size=n)
    return MixedModelDesign(x, [RandomBlock("a", z1, 1.0), RandomBlock("b", z2, prec2)], y)


def single_block_design(n, m, seed):
    rng = np.random.default_rng(seed)
    x = np.column_stack([np.ones(n), rng.normal(size=n)])
    labels = np.arange(n) % m
    rng.shuffle(labels)
    z = np.eye(m)[labels]
    y = x @ np.array([1.0, 0.5]) + z @ rng.normal(scale=rng.uniform(0.5, 2.0), size=m)
    y = y + rng.normal(size=n)
    return MixedModelDesign(x, [RandomBlock("g", z, 1.0)], y)


def g_blocks(design, variances):
    return [v / b.precision for b, v in zip(design.blocks, variances)]


def dense_v(design, sigma2, variances):
    v = sigma2 * np.eye(design.n)
    for b, g in zip(design.blocks, g_blocks(design, variances)):
        v += (b.z * g) @ b.z.T
    return v


def dense_c(design, sigma2, variances):
    """Henderson coefficient matrix built entry by entry."""
    w = design.w
    q = w.shape[1]
    ginv = np.zeros(q)
    pos = design.p
    for b, var in zip(design.blocks, variances):
        ginv[pos:pos + b.size] = b.precision / var
        pos += b.size
    c = np.empty((q, q))
    for i in range(q):
        for j in range(q):
            c[i, j] = float(np.dot(w[:, i], w[:, j])) / sigma2 + (ginv[i] if i == j else 0.0)
    return c


def q_matrix(design, sigma2, variances):
    v = dense_v(design, sigma2, variances)
    vinv = np.linalg.inv(v)
    x = design.x
    vx = vinv @ x
    return vinv - vx @ np.linalg.solve(x.T @ vx, vx.T)


def gls_blup(design, sigma2, variances):
    v = dense_v(design, sigma2, variances)
    vinv = np.linalg.inv(v)
    x = design.x
    beta = np.linalg.solve(x.T @ vinv @ x, x.T @ vinv @ design.y)
    r = vinv @ (design.y - x @ beta)
    cs = [g * (b.z.T @ r) for b, g in zip(design.blocks, g_blocks(design, variances))]
    return beta, cs


def trace_ed(design, sigma2, variances):
    q = q_matrix(design, sigma2, variances)
    return np.array([np.trace((b.z.T @ q @ b.z) * g[None, :])
                     for b, g in zip(design.blocks, g_blocks(design, variances))])


def pinv_ed(design, sigma2, variances):
    """ED_k = trace(Z_k G_k Z_k' [(I - P_X) V (I - P_X)]^+)."""
    x = design.x
    m = np.eye(design.n) - x @ np.linalg.pinv(x)
    core = np.linalg.pinv(m @ dense_v(design, sigma2, variances) @ m, hermitian=True)
    return np.array([np.trace((b.z * g) @ b.z.T @ core)
                     for b, g in zip(design.blocks, g_blocks(design, variances))])


def dense_deviance(design, sigma2, variances):
    """log|V| + log|X'V^-1 X| + y'Qy."""
    v = dense_v(design, sigma2, variances)
    vinv = np.linalg.inv(v)
    x = design.x
    _, ld_v = np.linalg.slogdet(v)
    _, ld_x = np.linalg.slogdet(x.T @ vinv @ x)
    q = q_matrix(design, sigma2, variances)
    return ld_v + ld_x + float(design.y @ q @ design.y)
