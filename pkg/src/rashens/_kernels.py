"""Numba kernels for the hot paths: CART fitting, prediction, interventional
tree-SHAP, Lloyd iterations and silhouette scoring.

Everything here is deterministic: no RNG, fixed loop orders, ties resolved by
lowest index. All callers pass float64 C-contiguous arrays.
"""

import numpy as np
from numba import njit

LEAF = -1


@njit(cache=True)
def fit_tree_arrays(Xs, y, max_depth, min_leaf, classification):
    """Grow a CART tree on Xs (rows x subset-features) / y.

    Returns (feature, threshold, left, right, value, count, n_nodes) where
    feature holds subset-local column positions for internal nodes, LEAF for
    leaves. Splits maximize weighted impurity decrease (gini for
    classification, SSE for regression); thresholds are midpoints of
    consecutive distinct sorted values; ties keep the first candidate in
    (feature asc, threshold asc) order.
    """
    n, s = Xs.shape
    max_leaves = n // min_leaf if min_leaf > 0 else n
    if max_leaves < 1:
        max_leaves = 1
    cap = 2 * max_leaves + 1
    feature = np.full(cap, LEAF, dtype=np.int64)
    threshold = np.zeros(cap, dtype=np.float64)
    left = np.full(cap, LEAF, dtype=np.int64)
    right = np.full(cap, LEAF, dtype=np.int64)
    value = np.zeros(cap, dtype=np.float64)
    count = np.zeros(cap, dtype=np.int64)

    idx = np.arange(n)
    buf = np.empty(n, dtype=np.int64)

    # explicit DFS stack of (node, lo, hi, depth)
    stack_node = np.empty(cap, dtype=np.int64)
    stack_lo = np.empty(cap, dtype=np.int64)
    stack_hi = np.empty(cap, dtype=np.int64)
    stack_depth = np.empty(cap, dtype=np.int64)
    top = 0
    stack_node[top], stack_lo[top], stack_hi[top], stack_depth[top] = 0, 0, n, 0
    top += 1
    n_nodes = 1

    while top > 0:
        top -= 1
        node = stack_node[top]
        lo = stack_lo[top]
        hi = stack_hi[top]
        depth = stack_depth[top]
        m = hi - lo
        count[node] = m

        ysum = 0.0
        ymin = np.inf
        ymax = -np.inf
        for i in range(lo, hi):
            yv = y[idx[i]]
            ysum += yv
            if yv < ymin:
                ymin = yv
            if yv > ymax:
                ymax = yv
        value[node] = ysum / m

        if depth >= max_depth or m < 2 * min_leaf or ymin == ymax:
            continue

        # parent impurity on the weighted scale used for gains
        if classification:
            pos = ysum
            parent_imp = 2.0 * pos * (m - pos) / m
        else:
            ysq = 0.0
            for i in range(lo, hi):
                yv = y[idx[i]]
                ysq += yv * yv
            parent_imp = ysq - ysum * ysum / m

        # zero-gain splits are allowed: stopping is only depth / min_leaf /
        # purity, so e.g. XOR is still learnable at depth 2
        best_gain = -np.inf
        best_feat = -1
        best_thr = 0.0
        vals = np.empty(m, dtype=np.float64)
        ysorted = np.empty(m, dtype=np.float64)

        for j in range(s):
            for i in range(m):
                vals[i] = Xs[idx[lo + i], j]
            order = np.argsort(vals)
            for i in range(m):
                ysorted[i] = y[idx[lo + order[i]]]

            lsum = 0.0
            lsq = 0.0
            for i in range(1, m):
                yv = ysorted[i - 1]
                lsum += yv
                if not classification:
                    lsq += yv * yv
                a = vals[order[i - 1]]
                b = vals[order[i]]
                if a == b:
                    continue
                if i < min_leaf or m - i < min_leaf:
                    continue
                if classification:
                    limp = 2.0 * lsum * (i - lsum) / i
                    rpos = ysum - lsum
                    rimp = 2.0 * rpos * ((m - i) - rpos) / (m - i)
                else:
                    limp = lsq - lsum * lsum / i
                    rsq = ysq - lsq
                    rsum = ysum - lsum
                    rimp = rsq - rsum * rsum / (m - i)
                gain = parent_imp - limp - rimp
                if gain > best_gain:
                    thr = a + (b - a) / 2.0
                    if thr >= b:
                        thr = a
                    best_gain = gain
                    best_feat = j
                    best_thr = thr

        if best_feat < 0:
            continue

        # stable partition of idx[lo:hi] on x <= thr
        nl = 0
        for i in range(lo, hi):
            if Xs[idx[i], best_feat] <= best_thr:
                buf[lo + nl] = idx[i]
                nl += 1
        nr = nl
        for i in range(lo, hi):
            if Xs[idx[i], best_feat] > best_thr:
                buf[lo + nr] = idx[i]
                nr += 1
        for i in range(lo, hi):
            idx[i] = buf[i]

        lchild = n_nodes
        rchild = n_nodes + 1
        n_nodes += 2
        feature[node] = best_feat
        threshold[node] = best_thr
        left[node] = lchild
        right[node] = rchild

        stack_node[top], stack_lo[top], stack_hi[top], stack_depth[top] = (
            rchild, lo + nl, hi, depth + 1)
        top += 1
        stack_node[top], stack_lo[top], stack_hi[top], stack_depth[top] = (
            lchild, lo, lo + nl, depth + 1)
        top += 1

    return (feature[:n_nodes], threshold[:n_nodes], left[:n_nodes],
            right[:n_nodes], value[:n_nodes], count[:n_nodes])


@njit(cache=True)
def predict_rows(feature, threshold, left, right, value, X):
    """Root-to-leaf traversal for every row; x <= threshold goes left.

    `feature` must hold global column indices (see Tree.as_global_arrays).
    """
    n = X.shape[0]
    out = np.empty(n, dtype=np.float64)
    for i in range(n):
        node = 0
        while feature[node] != LEAF:
            if X[i, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = value[node]
    return out


@njit(cache=True)
def shap_interventional(cond_feat, cond_lo, cond_hi, leaf_ptr, leaf_val,
                        Xf, Xb, WA, WB):
    """Exact interventional Shapley values of a tree for each row of Xf,
    marginalizing withheld features over the rows of Xb.

    Leaves are given as interval conjunctions (cond_* flattened, leaf_ptr
    CSR-style). For a foreground/background pair, a leaf decomposes into the
    conditions satisfied only by the foreground (must be in the coalition)
    and only by the background (must be out); the closed-form Shapley weight
    of that conjunction game is WA[a, b] = (a-1)! b! / (a+b)! for required
    features and -WB[a, b] = -a! (b-1)! / (a+b)! for excluded ones.
    """
    n_f, d = Xf.shape
    n_b = Xb.shape[0]
    n_leaves = leaf_val.shape[0]
    phi = np.zeros((n_f, d), dtype=np.float64)

    max_c = 0
    for l in range(n_leaves):
        c = leaf_ptr[l + 1] - leaf_ptr[l]
        if c > max_c:
            max_c = c
    x_in = np.empty((n_f, max_c), dtype=np.bool_)
    z_in = np.empty((n_b, max_c), dtype=np.bool_)

    for l in range(n_leaves):
        c0 = leaf_ptr[l]
        c1 = leaf_ptr[l + 1]
        c = c1 - c0
        if c == 0:
            continue
        v = leaf_val[l]
        for i in range(n_f):
            for k in range(c):
                ft = cond_feat[c0 + k]
                xv = Xf[i, ft]
                x_in[i, k] = (xv > cond_lo[c0 + k]) and (xv <= cond_hi[c0 + k])
        for z in range(n_b):
            for k in range(c):
                ft = cond_feat[c0 + k]
                zv = Xb[z, ft]
                z_in[z, k] = (zv > cond_lo[c0 + k]) and (zv <= cond_hi[c0 + k])

        for i in range(n_f):
            for z in range(n_b):
                a = 0
                b = 0
                dead = False
                for k in range(c):
                    xi = x_in[i, k]
                    zi = z_in[z, k]
                    if xi:
                        if not zi:
                            a += 1
                    elif zi:
                        b += 1
                    else:
                        dead = True
                        break
                if dead or (a == 0 and b == 0):
                    continue
                wa = WA[a, b] * v
                wb = WB[a, b] * v
                for k in range(c):
                    xi = x_in[i, k]
                    zi = z_in[z, k]
                    if xi and not zi:
                        phi[i, cond_feat[c0 + k]] += wa
                    elif zi and not xi:
                        phi[i, cond_feat[c0 + k]] -= wb
    return phi / n_b


@njit(cache=True)
def lloyd(X, init_centroids, max_iter):
    """Lloyd iterations to an assignment fixpoint (or max_iter).

    Ties in the assignment go to the lowest centroid id. Empty clusters are
    reseeded to the point farthest from its nearest centroid (lowest index on
    ties, one point per repaired cluster). Returns (assign, centroids,
    inertia_history, n_iter); inertia is recorded after each assignment step.
    """
    n, d = X.shape
    k = init_centroids.shape[0]
    centroids = init_centroids.copy()
    assign = np.full(n, -1, dtype=np.int64)
    inertia = np.zeros(max_iter, dtype=np.float64)
    it = 0
    while it < max_iter:
        changed = False
        total = 0.0
        for i in range(n):
            best = 0
            bestd = np.inf
            for c in range(k):
                dist = 0.0
                for j in range(d):
                    diff = X[i, j] - centroids[c, j]
                    dist += diff * diff
                if dist < bestd:
                    bestd = dist
                    best = c
            total += bestd
            if best != assign[i]:
                assign[i] = best
                changed = True
        inertia[it] = total
        it += 1
        if not changed:
            break

        counts = np.zeros(k, dtype=np.int64)
        sums = np.zeros((k, d), dtype=np.float64)
        for i in range(n):
            c = assign[i]
            counts[c] += 1
            for j in range(d):
                sums[c, j] += X[i, j]
        for c in range(k):
            if counts[c] > 0:
                for j in range(d):
                    centroids[c, j] = sums[c, j] / counts[c]
        used = np.full(n, False)
        for c in range(k):
            if counts[c] == 0:
                far = -1
                fard = -1.0
                for i in range(n):
                    if used[i]:
                        continue
                    bd = np.inf
                    for c2 in range(k):
                        if counts[c2] == 0:
                            continue
                        dist = 0.0
                        for j in range(d):
                            diff = X[i, j] - centroids[c2, j]
                            dist += diff * diff
                        if dist < bd:
                            bd = dist
                    if bd > fard:
                        fard = bd
                        far = i
                if far >= 0:
                    used[far] = True
                    for j in range(d):
                        centroids[c, j] = X[far, j]
    return assign, centroids, inertia[:it], it


@njit(cache=True)
def silhouette_samples(X, assign, k):
    """Per-point silhouette with Euclidean distances.

    Points in singleton clusters score 0; a == b == 0 scores 0.
    """
    n, d = X.shape
    counts = np.zeros(k, dtype=np.int64)
    for i in range(n):
        counts[assign[i]] += 1
    sums = np.zeros((n, k), dtype=np.float64)
    for i in range(n):
        for j in range(i + 1, n):
            dist = 0.0
            for t in range(d):
                diff = X[i, t] - X[j, t]
                dist += diff * diff
            dist = np.sqrt(dist)
            sums[i, assign[j]] += dist
            sums[j, assign[i]] += dist
    out = np.zeros(n, dtype=np.float64)
    for i in range(n):
        ci = assign[i]
        if counts[ci] <= 1:
            continue
        a = sums[i, ci] / (counts[ci] - 1)
        b = np.inf
        for c in range(k):
            if c == ci or counts[c] == 0:
                continue
            m = sums[i, c] / counts[c]
            if m < b:
                b = m
        denom = a if a > b else b
        if denom > 0.0:
            out[i] = (b - a) / denom
    return out
