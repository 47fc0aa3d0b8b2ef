"""Compiled tree growing and forest traversal over CSR/CSC count matrices.

Implicit (unstored) entries are zeros. Candidate features at a node are drawn
uniformly without replacement from the columns that are non-constant on the
node's rows; constant columns are skipped and do not count towards the
per-node budget.
"""

from __future__ import annotations

import numpy as np
from numba import njit

GINI = 0
ENTROPY = 1

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


@njit(cache=True, nogil=True)
def _next_u64(state):
    # splitmix64
    state[0] += _GOLDEN
    z = state[0]
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


@njit(cache=True, nogil=True)
def _rand_below(state, n):
    return np.int64(_next_u64(state) % np.uint64(n))


@njit(cache=True, nogil=True)
def impurity(w, total, criterion):
    if total <= 0.0:
        return 0.0
    s = 0.0
    if criterion == GINI:
        for c in range(w.shape[0]):
            p = w[c] / total
            s += p * p
        return max(0.0, 1.0 - s)
    for c in range(w.shape[0]):
        if w[c] > 0.0:
            p = w[c] / total
            s -= p * np.log2(p)
    return max(0.0, s)


@njit(cache=True, nogil=True)
def _split_gain(lw, cw, rw, total, parent_term, criterion):
    wl = lw.sum()
    for c in range(cw.shape[0]):
        rw[c] = cw[c] - lw[c]
    return parent_term - wl * impurity(lw, wl, criterion) \
        - (total - wl) * impurity(rw, total - wl, criterion)


@njit(cache=True, nogil=True)
def _row_lookup(csr_ptr, csr_idx, csr_val, r, j):
    lo = csr_ptr[r]
    hi = csr_ptr[r + 1]
    while lo < hi:
        mid = (lo + hi) >> 1
        c = csr_idx[mid]
        if c < j:
            lo = mid + 1
        elif c > j:
            hi = mid
        else:
            return True, csr_val[mid]
    return False, 0.0


@njit(cache=True, nogil=True)
def _gather(j, start, end, idx, node, mark, csc_ptr, csc_idx, csc_val,
            csr_ptr, csr_idx, csr_val, gv, gr):
    """Stored values of column j on the node's rows into (gv, gr); returns count."""
    m = end - start
    k0 = csc_ptr[j]
    k1 = csc_ptr[j + 1]
    n = 0
    if k1 - k0 <= 4 * m:
        for k in range(k0, k1):
            r = csc_idx[k]
            if mark[r] == node:
                gv[n] = csc_val[k]
                gr[n] = r
                n += 1
    else:
        for i in range(start, end):
            r = idx[i]
            found, v = _row_lookup(csr_ptr, csr_idx, csr_val, r, j)
            if found:
                gv[n] = v
                gr[n] = r
                n += 1
    return n


@njit(cache=True, nogil=True)
def _sort_pairs(gv, gr, n, sv, sr, bucket):
    """Sort the first n (value, row) pairs by value into (sv, sr).

    Small non-negative integer values (the usual case for counts) use a stable
    counting sort; anything else falls back to a general sort.
    """
    vmax = 0.0
    small = True
    for q in range(n):
        v = gv[q]
        if v < 0.0 or v != np.floor(v):
            small = False
            break
        if v > vmax:
            vmax = v
    if small and vmax < bucket.shape[0] - 1:
        top = np.int64(vmax) + 1
        for b in range(top + 1):
            bucket[b] = 0
        for q in range(n):
            bucket[np.int64(gv[q]) + 1] += 1
        for b in range(1, top + 1):
            bucket[b] += bucket[b - 1]
        for q in range(n):
            b = np.int64(gv[q])
            pos = bucket[b]
            sv[pos] = gv[q]
            sr[pos] = gr[q]
            bucket[b] = pos + 1
        return
    order = np.argsort(gv[:n], kind="mergesort")
    for q in range(n):
        sv[q] = gv[order[q]]
        sr[q] = gr[order[q]]


@njit(cache=True, nogil=True)
def grow_tree(csc_ptr, csc_idx, csc_val, csr_ptr, csr_idx, csr_val,
              y, n_classes, rows, w, max_features, max_depth, min_leaf,
              criterion, seed):
    """Grow one tree on ``rows`` (distinct row ids) with per-row weights ``w``.

    Returns node arrays (feature, threshold, left, right, value, n_samples,
    weighted_n, impurity) and the per-column weighted impurity decrease.
    A node is a leaf when ``feature == -1``; rows with ``x <= threshold`` go left.
    """
    n_total = csr_ptr.shape[0] - 1
    p = csc_ptr.shape[0] - 1
    m0 = rows.shape[0]
    cap = 2 * (m0 // max(min_leaf, 1)) + 3

    feature = np.full(cap, -1, np.int64)
    threshold = np.zeros(cap, np.float64)
    left = np.full(cap, -1, np.int64)
    right = np.full(cap, -1, np.int64)
    value = np.zeros((cap, n_classes), np.float64)
    n_samples = np.zeros(cap, np.int64)
    weighted_n = np.zeros(cap, np.float64)
    node_imp = np.zeros(cap, np.float64)
    importance = np.zeros(p, np.float64)

    idx = rows.copy()
    buf = np.empty(m0, np.int64)
    mark = np.full(n_total, -1, np.int64)
    col_stamp = np.full(p, -1, np.int64)
    cand = np.empty(p, np.int64)
    gv = np.empty(m0, np.float64)
    gr = np.empty(m0, np.int64)
    xval = np.zeros(n_total, np.float64)
    cw = np.zeros(n_classes, np.float64)
    nzw = np.zeros(n_classes, np.float64)
    lw = np.zeros(n_classes, np.float64)
    rw = np.zeros(n_classes, np.float64)
    sv = np.empty(m0, np.float64)
    sr = np.empty(m0, np.int64)
    bucket = np.zeros(2 * m0 + 66, np.int64)

    state = np.zeros(1, np.uint64)
    state[0] = np.uint64(seed)

    st_start = np.empty(cap, np.int64)
    st_end = np.empty(cap, np.int64)
    st_depth = np.empty(cap, np.int64)
    st_parent = np.empty(cap, np.int64)
    st_left = np.empty(cap, np.bool_)
    sp = 0
    st_start[0] = 0
    st_end[0] = m0
    st_depth[0] = 0
    st_parent[0] = -1
    st_left[0] = False
    sp = 1
    n_nodes = 0

    while sp > 0:
        sp -= 1
        start = st_start[sp]
        end = st_end[sp]
        depth = st_depth[sp]
        parent = st_parent[sp]
        node = n_nodes
        n_nodes += 1
        if parent >= 0:
            if st_left[sp]:
                left[parent] = node
            else:
                right[parent] = node

        m = end - start
        cw[:] = 0.0
        for i in range(start, end):
            r = idx[i]
            cw[y[r]] += w[r]
        W = cw.sum()
        for c in range(n_classes):
            value[node, c] = cw[c] / W if W > 0.0 else 1.0 / n_classes
        n_samples[node] = m
        weighted_n[node] = W
        imp = impurity(cw, W, criterion)
        node_imp[node] = imp
        if depth >= max_depth or m < 2 * min_leaf or imp <= 1e-15:
            continue

        for i in range(start, end):
            mark[idx[i]] = node
        node_nnz = 0
        for i in range(start, end):
            r = idx[i]
            node_nnz += csr_ptr[r + 1] - csr_ptr[r]
        nc = 0
        if node_nnz < p:
            # few stored entries: enumerate the columns actually present
            for i in range(start, end):
                r = idx[i]
                for k in range(csr_ptr[r], csr_ptr[r + 1]):
                    j = csr_idx[k]
                    if col_stamp[j] != node:
                        col_stamp[j] = node
                        cand[nc] = j
                        nc += 1
        else:
            # dense node: draw from every column, constant ones are skipped below
            for j in range(p):
                cand[j] = j
            nc = p

        best_gain = -1.0
        best_f = -1
        best_thr = 0.0
        visited = 0
        found = 0
        parent_term = W * imp
        while found < max_features and visited < nc:
            t = visited + _rand_below(state, nc - visited)
            j = cand[t]
            cand[t] = cand[visited]
            cand[visited] = j
            visited += 1

            nnz = _gather(j, start, end, idx, node, mark, csc_ptr, csc_idx, csc_val,
                          csr_ptr, csr_idx, csr_val, gv, gr)
            if nnz == 0:
                continue
            n_zero = m - nnz
            _sort_pairs(gv, gr, nnz, sv, sr, bucket)
            if n_zero == 0 and sv[0] == sv[nnz - 1]:
                continue
            found += 1

            nzw[:] = 0.0
            for q in range(nnz):
                r = sr[q]
                nzw[y[r]] += w[r]
            n_neg = 0
            while n_neg < nnz and sv[n_neg] < 0.0:
                n_neg += 1

            lw[:] = 0.0
            ln = 0
            prev = 0.0
            have_prev = False
            zero_pending = n_zero > 0
            s = 0
            # walk negatives, the implicit-zero block, then positives
            while True:
                if zero_pending and s == n_neg:
                    v = 0.0
                    is_zero = True
                elif s < nnz:
                    v = sv[s]
                    is_zero = False
                else:
                    break
                if have_prev and v > prev and ln >= min_leaf and m - ln >= min_leaf:
                    gain = _split_gain(lw, cw, rw, W, parent_term, criterion)
                    if gain > best_gain:
                        best_gain = gain
                        best_f = j
                        thr = 0.5 * (prev + v)
                        best_thr = prev if thr >= v else thr
                if is_zero:
                    for c in range(n_classes):
                        lw[c] += cw[c] - nzw[c]
                    ln += n_zero
                    zero_pending = False
                else:
                    r = sr[s]
                    lw[y[r]] += w[r]
                    ln += 1
                    s += 1
                prev = v
                have_prev = True

        if best_f < 0:
            continue

        # partition rows: x <= threshold to the left, order preserved
        for i in range(start, end):
            xval[idx[i]] = 0.0
        nnz = _gather(best_f, start, end, idx, node, mark, csc_ptr, csc_idx, csc_val,
                      csr_ptr, csr_idx, csr_val, gv, gr)
        for q in range(nnz):
            xval[gr[q]] = gv[q]
        nl = 0
        nr = 0
        for i in range(start, end):
            r = idx[i]
            if xval[r] <= best_thr:
                idx[start + nl] = r
                nl += 1
            else:
                buf[nr] = r
                nr += 1
        for q in range(nr):
            idx[start + nl + q] = buf[q]
        mid = start + nl

        feature[node] = best_f
        threshold[node] = best_thr
        importance[best_f] += max(best_gain, 0.0)

        st_start[sp] = mid
        st_end[sp] = end
        st_depth[sp] = depth + 1
        st_parent[sp] = node
        st_left[sp] = False
        sp += 1
        st_start[sp] = start
        st_end[sp] = mid
        st_depth[sp] = depth + 1
        st_parent[sp] = node
        st_left[sp] = True
        sp += 1

    return (feature[:n_nodes].copy(), threshold[:n_nodes].copy(), left[:n_nodes].copy(),
            right[:n_nodes].copy(), value[:n_nodes].copy(), n_samples[:n_nodes].copy(),
            weighted_n[:n_nodes].copy(), node_imp[:n_nodes].copy(), importance)


@njit(cache=True, nogil=True)
def predict_trees(feature, threshold, left, right, value, roots,
                  csr_ptr, csr_idx, csr_val, n_features):
    """Mean leaf value over the packed trees for every CSR row.

    Child pointers are global indices into the packed arrays; ``roots`` holds
    each tree's root index, summed in that order.
    """
    n = csr_ptr.shape[0] - 1
    k = value.shape[1]
    n_trees = roots.shape[0]
    out = np.zeros((n, k), np.float64)
    dense = np.zeros(n_features, np.float64)
    acc = np.zeros(k, np.float64)
    for i in range(n):
        for q in range(csr_ptr[i], csr_ptr[i + 1]):
            j = csr_idx[q]
            if j < n_features:
                dense[j] = csr_val[q]
        acc[:] = 0.0
        for t in range(n_trees):
            node = roots[t]
            while feature[node] >= 0:
                if dense[feature[node]] <= threshold[node]:
                    node = left[node]
                else:
                    node = right[node]
            for c in range(k):
                acc[c] += value[node, c]
        for c in range(k):
            out[i, c] = acc[c] / n_trees
        for q in range(csr_ptr[i], csr_ptr[i + 1]):
            j = csr_idx[q]
            if j < n_features:
                dense[j] = 0.0
    return out


@njit(cache=True, nogil=True)
def apply_trees(feature, threshold, left, right, roots, csr_ptr, csr_idx, csr_val, n_features):
    """Leaf index reached in each tree by each row, shape (n_rows, n_trees)."""
    n = csr_ptr.shape[0] - 1
    n_trees = roots.shape[0]
    out = np.empty((n, n_trees), np.int64)
    dense = np.zeros(n_features, np.float64)
    for i in range(n):
        for q in range(csr_ptr[i], csr_ptr[i + 1]):
            if csr_idx[q] < n_features:
                dense[csr_idx[q]] = csr_val[q]
        for t in range(n_trees):
            node = roots[t]
            while feature[node] >= 0:
                if dense[feature[node]] <= threshold[node]:
                    node = left[node]
                else:
                    node = right[node]
            out[i, t] = node
        for q in range(csr_ptr[i], csr_ptr[i + 1]):
            if csr_idx[q] < n_features:
                dense[csr_idx[q]] = 0.0
    return out
