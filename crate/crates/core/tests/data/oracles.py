"""Reference values for the fixture datasets, computed with statsmodels.

Run from this directory; prints the numbers frozen into the Rust tests.
"""
import numpy as np
import pandas as pd
import statsmodels.api as sm
import statsmodels.formula.api as smf
from scipy.special import expit, logit

np.set_printoptions(precision=17)


def dense_ml(d, cols, nested):
    """ML by direct optimisation of the dense multivariate normal likelihood."""
    from scipy.optimize import minimize
    groups = [g for _, g in d.groupby("cluster", sort=True)]
    X = [g[cols].to_numpy(float) for g in groups]
    Y = [g.y.to_numpy(float) for g in groups]
    P = [g.period.to_numpy() for g in groups]

    def profile(theta):
        tau2, kappa2, sigma2 = np.exp(theta[0]), np.exp(theta[1]) if nested else 0.0, np.exp(theta[-1])
        vs = [sigma2 * np.eye(len(y)) + tau2 + kappa2 * (p[:, None] == p[None, :]) for y, p in zip(Y, P)]
        vi = [np.linalg.inv(v) for v in vs]
        A = sum(x.T @ w @ x for x, w in zip(X, vi))
        b = sum(x.T @ w @ y for x, w, y in zip(X, vi, Y))
        beta = np.linalg.solve(A, b)
        ll = 0.0
        for x, y, v, w in zip(X, Y, vs, vi):
            r = y - x @ beta
            ll -= 0.5 * (len(y) * np.log(2 * np.pi) + np.linalg.slogdet(v)[1] + r @ w @ r)
        return ll, beta

    k = 3 if nested else 2
    best = None
    for start in ([0.0] * k, [1.0] * k, [-2.0] * (k - 1) + [2.0]):
        r = minimize(lambda t: -profile(t)[0], start, method="Nelder-Mead",
                     options=dict(xatol=1e-10, fatol=1e-12, maxiter=20000, maxfev=40000))
        if best is None or r.fun < best.fun:
            best = r
    ll, beta = profile(best.x)
    return beta, np.exp(best.x), ll


def lmm_a1():
    d = pd.read_csv("a1_small.csv")
    d["trt"] = (d.period >= d.z).astype(float)
    for p in range(1, 6):
        d[f"p{p}"] = (d.period == p).astype(float)
    periods = ["p1", "p2", "p3", "p4", "p5"]
    beta, vc, ll = dense_ml(d, periods + ["trt", "x1", "x2", "x3", "x4"], nested=False)
    print("lmm exchangeable full: beta", repr(beta))
    print("  tau2, sigma2", repr(vc), "llf", repr(ll))
    d["dur"] = np.where(d.period >= d.z, d.period - d.z + 1, 0)
    dur = []
    for k in range(1, 6):
        d[f"d{k}"] = (d.dur == k).astype(float)
        dur.append(f"d{k}")
    beta, vc, ll = dense_ml(d, periods + dur, nested=True)
    print("lmm nested duration none: beta", repr(beta))
    print("  tau2, kappa2, sigma2", repr(vc), "llf", repr(ll))


def gee_c1():
    d = pd.read_csv("c1_small.csv")
    d = d[d.period <= 2].copy()
    d["p1"] = (d.period == 1).astype(float)
    d["p2"] = (d.period == 2).astype(float)
    dur = d.period - d.z + 1
    d["t11"] = ((d.period == 1) & (dur == 1)).astype(float)
    d["t21"] = ((d.period == 2) & (dur == 1)).astype(float)
    d["t22"] = ((d.period == 2) & (dur == 2)).astype(float)
    cols = ["p1", "p2", "t11", "t21", "t22"]
    fam = sm.families.Binomial()
    g = sm.GEE(d.y, d[cols], groups=d.cluster, family=fam,
               cov_struct=sm.cov_struct.Independence()).fit(ctol=1e-12, maxiter=200)
    print("gee logit independence: beta", repr(g.params.values))
    print("  robust se", repr(g.bse.values))
    gx = sm.GEE(d.y, d[cols + ["x1", "x2"]], groups=d.cluster, family=fam,
                cov_struct=sm.cov_struct.Independence()).fit(ctol=1e-12, maxiter=200)
    b = gx.params
    xb = d.x1 * b.x1 + d.x2 * b.x2
    mu = lambda j, t: expit(b[f"p{j}"] + t + xb).mean()
    lor = [logit(mu(1, b.t11)) - logit(mu(1, 0)),
           logit(mu(2, b.t21)) - logit(mu(2, 0)),
           logit(mu(2, b.t22)) - logit(mu(2, 0))]
    print("gee logit independence + x: beta", repr(b.values))
    print("  g-computation odds ratios", repr(np.exp(lor)))


lmm_a1()
gee_c1()
