"""Compiled inner loops for tree growth, prediction and tree SHAP.

Trees are stored as flat arrays: ``feature`` (-1 marks a leaf), ``threshold``
(rows with ``x < threshold`` go left), ``left``/``right`` child ids,
``value`` (node mean of the fitted target), ``cover`` and split ``gain``.
"""

import numpy as np
from numba import config, njit, prange

# the bundled TBB is often too old; prefer OpenMP or the builtin workqueue
config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]


@njit(cache=True, nogil=True)
def build_tree(X, order, g, in_sample, max_depth, min_leaf):
    """Grow one least-squares regression tree level by level.

    ``order[f]`` lists row indices sorted ascending (stably) by ``X[:, f]``.
    Split search is exact greedy over every boundary between distinct
    values; strict improvement keeps the lowest feature index and then the
    lowest threshold on ties.
    """
    n, p = X.shape
    cap = 2 ** (max_depth + 1) - 1
    feature = np.full(cap, -1, np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, np.int64)
    right = np.full(cap, -1, np.int64)
    sum_g = np.zeros(cap)
    sumsq = np.zeros(cap)
    cnt = np.zeros(cap, np.int64)
    gain = np.zeros(cap)

    node_of = np.full(n, -1, np.int64)
    for i in range(n):
        if in_sample[i]:
            node_of[i] = 0
            sum_g[0] += g[i]
            sumsq[0] += g[i] * g[i]
            cnt[0] += 1
    n_nodes = 1
    start, stop = 0, 1

    for depth in range(max_depth):
        nf = stop - start
        if nf == 0:
            break
        best_gain = np.zeros(nf)
        best_feat = np.full(nf, -1, np.int64)
        best_thr = np.zeros(nf)
        tol = np.empty(nf)
        for kk in range(nf):
            k = start + kk
            tol[kk] = 1e-12 * sumsq[k] + 1e-300
        lsum = np.zeros(nf)
        lcnt = np.zeros(nf, np.int64)
        last = np.zeros(nf)
        for f in range(p):
            lsum[:] = 0.0
            lcnt[:] = 0
            for r in range(n):
                i = order[f, r]
                k = node_of[i]
                if k < start:
                    continue
                kk = k - start
                x = X[i, f]
                lc = lcnt[kk]
                rc = cnt[k] - lc
                if lc >= min_leaf and rc >= min_leaf and x > last[kk]:
                    ls = lsum[kk]
                    rs = sum_g[k] - ls
                    gn = ls * ls / lc + rs * rs / rc - sum_g[k] * sum_g[k] / cnt[k]
                    if gn > best_gain[kk] and gn > tol[kk]:
                        best_gain[kk] = gn
                        best_feat[kk] = f
                        t = 0.5 * (last[kk] + x)
                        if not (t > last[kk]):
                            t = x
                        best_thr[kk] = t
                lsum[kk] += g[i]
                lcnt[kk] += 1
                last[kk] = x

        new_start = n_nodes
        child = np.full(nf, -1, np.int64)
        for kk in range(nf):
            if best_feat[kk] >= 0:
                k = start + kk
                feature[k] = best_feat[kk]
                threshold[k] = best_thr[kk]
                gain[k] = best_gain[kk]
                left[k] = n_nodes
                right[k] = n_nodes + 1
                child[kk] = n_nodes
                n_nodes += 2
        for i in range(n):
            k = node_of[i]
            if k < start:
                continue
            kk = k - start
            if child[kk] < 0:
                continue
            c = child[kk]
            if X[i, best_feat[kk]] >= best_thr[kk]:
                c += 1
            node_of[i] = c
            sum_g[c] += g[i]
            sumsq[c] += g[i] * g[i]
            cnt[c] += 1
        start, stop = new_start, n_nodes

    value = np.zeros(n_nodes)
    for k in range(n_nodes):
        if cnt[k] > 0:
            value[k] = sum_g[k] / cnt[k]
    return (feature[:n_nodes], threshold[:n_nodes], left[:n_nodes], right[:n_nodes],
            value, cnt[:n_nodes], gain[:n_nodes])


@njit(cache=True, nogil=True)
def predict_packed(X, feature, threshold, left, right, value, offsets):
    """Sum of leaf values over all trees (rows summed in tree order)."""
    n = X.shape[0]
    out = np.zeros(n)
    for i in range(n):
        acc = 0.0
        for t in range(len(offsets) - 1):
            b = offsets[t]
            k = 0
            while feature[b + k] >= 0:
                if X[i, feature[b + k]] < threshold[b + k]:
                    k = left[b + k]
                else:
                    k = right[b + k]
            acc += value[b + k]
        out[i] = acc
    return out


@njit(cache=True, nogil=True)
def _shap_pair(x, z, feature, threshold, left, right, value, b, weights, phi, state,
               st_node, st_depth, st_feat, st_state, st_a, st_b, path_feat):
    """Add the Shapley attribution of one (foreground, background) pair for
    one tree.

    A leaf is reached under coalition S iff S contains every feature on which
    only the foreground satisfies the path (set A) and none of the features
    on which only the background does (set B). That indicator game has
    closed-form Shapley values, weighted by ``weights[a, b]``.
    """
    sp = 0
    st_node[0] = 0
    st_depth[0] = 0
    st_feat[0] = -1
    st_state[0] = 0
    st_a[0] = 0
    st_b[0] = 0
    sp = 1
    plen = 0
    while sp > 0:
        sp -= 1
        node = st_node[sp]
        d = st_depth[sp]
        fa = st_feat[sp]
        a = st_a[sp]
        bb = st_b[sp]
        while plen > d:
            plen -= 1
            if path_feat[plen] >= 0:
                state[path_feat[plen]] = 0
        path_feat[plen] = fa
        plen += 1
        if fa >= 0:
            state[fa] = st_state[sp]
        k = b + node
        f = feature[k]
        if f < 0:
            if a + bb == 0:
                continue
            v = value[k]
            for q in range(plen):
                ff = path_feat[q]
                if ff < 0:
                    continue
                if state[ff] == 1:
                    phi[ff] += v * weights[a - 1, bb]
                else:
                    phi[ff] -= v * weights[a, bb - 1]
            continue
        gx = x[f] < threshold[k]
        gz = z[f] < threshold[k]
        s = state[f]
        if s == 1 or (s == 0 and gx == gz):
            nxt = left[k] if gx else right[k]
            st_node[sp] = nxt
            st_depth[sp] = plen
            st_feat[sp] = -1
            st_state[sp] = 0
            st_a[sp] = a
            st_b[sp] = bb
            sp += 1
        elif s == 2:
            nxt = left[k] if gz else right[k]
            st_node[sp] = nxt
            st_depth[sp] = plen
            st_feat[sp] = -1
            st_state[sp] = 0
            st_a[sp] = a
            st_b[sp] = bb
            sp += 1
        else:
            nx = left[k] if gx else right[k]
            nz = left[k] if gz else right[k]
            st_node[sp] = nz
            st_depth[sp] = plen
            st_feat[sp] = f
            st_state[sp] = 2
            st_a[sp] = a
            st_b[sp] = bb + 1
            sp += 1
            st_node[sp] = nx
            st_depth[sp] = plen
            st_feat[sp] = f
            st_state[sp] = 1
            st_a[sp] = a + 1
            st_b[sp] = bb
            sp += 1
    while plen > 0:
        plen -= 1
        if path_feat[plen] >= 0:
            state[path_feat[plen]] = 0


@njit(cache=True, parallel=True)
def shap_packed(X, Z, feature, threshold, left, right, value, offsets, weights, max_nodes):
    """Interventional Shapley values of the summed trees, averaged over the
    background rows ``Z``. Returns an ``n x p`` matrix."""
    n, p = X.shape
    m = Z.shape[0]
    out = np.zeros((n, p))
    stack = max_nodes + 2
    for i in prange(n):
        phi = np.zeros(p)
        state = np.zeros(p, np.int64)
        st_node = np.zeros(stack, np.int64)
        st_depth = np.zeros(stack, np.int64)
        st_feat = np.zeros(stack, np.int64)
        st_state = np.zeros(stack, np.int64)
        st_a = np.zeros(stack, np.int64)
        st_b = np.zeros(stack, np.int64)
        path_feat = np.zeros(stack, np.int64)
        for j in range(m):
            for t in range(len(offsets) - 1):
                _shap_pair(X[i], Z[j], feature, threshold, left, right, value, offsets[t],
                           weights, phi, state, st_node, st_depth, st_feat, st_state,
                           st_a, st_b, path_feat)
        for f in range(p):
            out[i, f] = phi[f] / m
    return out
