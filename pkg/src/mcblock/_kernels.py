"""Compiled inner loops for the array-backed Monte-Carlo quadtree forest.

Node storage is a pair of row-per-node tables: ``I`` (int32 columns below)
and ``F`` (float64: loss, stored UCT). Children of a node occupy one
contiguous block of four slots; two-way splits leave two slots dead.
"""

import numpy as np
from numba import njit

# int columns
X, Y, W, H, PARENT, CHILD, NCHILD, TREE, LAST, GEN, MARK, ALIVE, DEPTH, DIRTY = range(14)
N_ICOLS = 14
MAX_DEPTH = 64
# float columns
LOSS, UCT = 0, 1
N_FCOLS = 2
# meta (int64) slots
M_NALLOC, M_NFREE, M_NLEAVES = 0, 1, 2
# fmeta (float64) slots
FM_SUMLOSS = 0


@njit(cache=True)
def alloc_block(I, free, meta):
    if meta[M_NFREE] > 0:
        meta[M_NFREE] -= 1
        return free[meta[M_NFREE]]
    s = meta[M_NALLOC]
    meta[M_NALLOC] += 4
    return s


@njit(cache=True)
def free_block(I, free, meta, s):
    for c in range(s, s + 4):
        I[c, ALIVE] = 0
        I[c, CHILD] = -1
        I[c, NCHILD] = 0
        I[c, GEN] += 1
    free[meta[M_NFREE]] = s
    meta[M_NFREE] += 1


@njit(cache=True)
def expand(I, F, free, meta, fmeta, leaf, min_side):
    """Split ``leaf`` in place; returns the number of children made (0 if too small)."""
    w = I[leaf, W]
    h = I[leaf, H]
    nx = 2 if w > min_side else 1
    ny = 2 if h > min_side else 1
    n = nx * ny
    if n == 1:
        return 0
    s = alloc_block(I, free, meta)
    area_p = float(w * h)
    loss = F[leaf, LOSS]
    uct = F[leaf, UCT]
    k = 0
    for jy in range(ny):
        if ny == 1:
            cy, ch = I[leaf, Y], h
        elif jy == 0:
            cy, ch = I[leaf, Y], (h + 1) // 2
        else:
            cy, ch = I[leaf, Y] + (h + 1) // 2, h // 2
        for jx in range(nx):
            if nx == 1:
                cx, cw = I[leaf, X], w
            elif jx == 0:
                cx, cw = I[leaf, X], (w + 1) // 2
            else:
                cx, cw = I[leaf, X] + (w + 1) // 2, w // 2
            c = s + k
            I[c, X] = cx
            I[c, Y] = cy
            I[c, W] = cw
            I[c, H] = ch
            I[c, PARENT] = leaf
            I[c, CHILD] = -1
            I[c, NCHILD] = 0
            I[c, TREE] = I[leaf, TREE]
            I[c, LAST] = I[leaf, LAST]
            I[c, GEN] += 1
            I[c, MARK] = 0
            I[c, ALIVE] = 1
            I[c, DEPTH] = I[leaf, DEPTH] + 1
            F[c, LOSS] = loss
            F[c, UCT] = uct * (cw * ch) / area_p
            k += 1
    I[leaf, CHILD] = s
    I[leaf, NCHILD] = n
    meta[M_NLEAVES] += n - 1
    fmeta[FM_SUMLOSS] += (n - 1) * loss
    return n


@njit(cache=True)
def block_variance(tsum, tsq, toff, tw1, tree, x, y, w, h):
    off = toff[tree]
    w1 = tw1[tree]
    a = (y * w1 + x) * 3 + off
    b = (y * w1 + x + w) * 3 + off
    c = ((y + h) * w1 + x) * 3 + off
    d = ((y + h) * w1 + x + w) * 3 + off
    n = float(w * h)
    total = 0.0
    for ch in range(3):
        m = (tsum[d + ch] - tsum[b + ch] - tsum[c + ch] + tsum[a + ch]) / n
        q = (tsq[d + ch] - tsq[b + ch] - tsq[c + ch] + tsq[a + ch]) / n
        v = q - m * m
        if v > 0.0:
            total += v
    return total / 3.0


@njit(cache=True)
def refresh_internal(I, F, p):
    """Recompute U (sum) and L (mean) of ``p`` from its children; returns True if all are leaves."""
    s = I[p, CHILD]
    n = I[p, NCHILD]
    su = 0.0
    sl = 0.0
    all_leaves = True
    for c in range(s, s + n):
        su += F[c, UCT]
        sl += F[c, LOSS]
        if I[c, NCHILD] > 0:
            all_leaves = False
    F[p, UCT] = su
    F[p, LOSS] = sl / n
    return all_leaves


@njit(cache=True)
def prune_if(I, F, free, meta, fmeta, p, eps_l, eps_c, tsum, tsq, toff, tw1):
    """Merge the (all-leaf) children of ``p`` when loss and color variance are small."""
    loss = F[p, LOSS]
    mean_loss = fmeta[FM_SUMLOSS] / meta[M_NLEAVES]
    if not (loss <= 0.0 or loss < eps_l * mean_loss):
        return False
    if block_variance(tsum, tsq, toff, tw1, I[p, TREE],
                      I[p, X], I[p, Y], I[p, W], I[p, H]) >= eps_c:
        return False
    s = I[p, CHILD]
    n = I[p, NCHILD]
    child_loss = 0.0
    last = I[s, LAST]
    for c in range(s, s + n):
        child_loss += F[c, LOSS]
        if I[c, LAST] > last:
            last = I[c, LAST]
    fmeta[FM_SUMLOSS] += loss - child_loss
    meta[M_NLEAVES] -= n - 1
    I[p, LAST] = last
    I[p, CHILD] = -1
    I[p, NCHILD] = 0
    free_block(I, free, meta, s)
    return True


@njit(cache=True)
def try_prune(I, F, free, meta, fmeta, p, eps_l, eps_c, tsum, tsq, toff, tw1):
    n = I[p, NCHILD]
    if n == 0:
        return False
    s = I[p, CHILD]
    for c in range(s, s + n):
        if I[c, NCHILD] > 0:
            return False
    return prune_if(I, F, free, meta, fmeta, p, eps_l, eps_c, tsum, tsq, toff, tw1)


@njit(cache=True)
def gather_rects(I, nodes):
    out = np.empty((nodes.size, 4), dtype=np.int64)
    for i in range(nodes.size):
        j = nodes[i]
        out[i, 0] = I[j, X]
        out[i, 1] = I[j, Y]
        out[i, 2] = I[j, W]
        out[i, 3] = I[j, H]
    return out


@njit(cache=True)
def first_non_leaf(I, nalloc, nodes):
    """Position of the first entry of ``nodes`` that is not a live leaf, or -1."""
    for i in range(nodes.size):
        j = nodes[i]
        if j < 0 or j >= nalloc or I[j, ALIVE] != 1 or I[j, NCHILD] != 0:
            return i
    return -1


@njit(cache=True)
def backpropagate(I, F, free, meta, fmeta, nodes, losses, cur_iter, frame,
                  do_prune, eps_l, eps_c, tsum, tsq, toff, tw1, stamp):
    """Write measured leaf losses and refresh every ancestor on their root paths.

    Each distinct ancestor is refreshed once, deepest first, so a parent always
    sees final child values. ``frame`` converts a true UCT into the stored
    (lazily scaled) frame; ``stamp`` must differ from any earlier call.
    Returns the number of prunes performed.
    """
    for i in range(nodes.size):
        j = nodes[i]
        fmeta[FM_SUMLOSS] += losses[i] - F[j, LOSS]
        F[j, LOSS] = losses[i]
        F[j, UCT] = losses[i] * (I[j, W] * I[j, H]) * frame
        I[j, LAST] = cur_iter
    # distinct ancestors, bucketed by depth
    dirty = np.empty(nodes.size * 4 + 16, dtype=np.int64)
    nd = 0
    counts = np.zeros(MAX_DEPTH + 1, dtype=np.int64)
    for i in range(nodes.size):
        p = I[nodes[i], PARENT]
        while p >= 0 and I[p, DIRTY] != stamp:
            I[p, DIRTY] = stamp
            if nd == dirty.size:
                grown = np.empty(dirty.size * 2, dtype=np.int64)
                grown[:nd] = dirty[:nd]
                dirty = grown
            dirty[nd] = p
            nd += 1
            counts[I[p, DEPTH]] += 1
            p = I[p, PARENT]
    start = np.zeros(MAX_DEPTH + 2, dtype=np.int64)
    for d in range(MAX_DEPTH, -1, -1):
        start[d] = start[d + 1] + counts[d]
    order = np.empty(nd, dtype=np.int64)
    fill = start.copy()
    for k in range(nd):
        d = I[dirty[k], DEPTH] + 1
        # deepest bucket first: bucket d occupies [start[d + 1], start[d])
        order[fill[d]] = dirty[k]
        fill[d] += 1
    pruned = 0
    for k in range(nd):
        p = order[k]
        all_leaves = refresh_internal(I, F, p)
        if do_prune and all_leaves:
            if prune_if(I, F, free, meta, fmeta, p, eps_l, eps_c, tsum, tsq, toff, tw1):
                pruned += 1
    return pruned


@njit(cache=True)
def _descend(I, F, j, v):
    """Walk from ``j`` to a leaf; ``v`` is uniform on [0, U_j).

    Child ``k`` of the current node is entered with probability U_k / U_j by
    subtracting sibling masses from ``v``, as in a sum-tree lookup.
    """
    while I[j, NCHILD] > 0:
        s = I[j, CHILD]
        n = I[j, NCHILD]
        pick = -1
        for c in range(s, s + n):
            u = F[c, UCT]
            if u <= 0.0:
                continue
            pick = c
            if v < u:
                break
            v -= u
        if pick < 0:
            pick = s + min(int(np.random.random() * n), n - 1)
            v = 0.0
        elif v >= F[pick, UCT]:
            # rounding overshoot past the last child
            v = np.random.random() * F[pick, UCT]
        j = pick
    return j


@njit(cache=True)
def _descend_uniform(I, j):
    while I[j, NCHILD] > 0:
        n = I[j, NCHILD]
        j = I[j, CHILD] + min(int(np.random.random() * n), n - 1)
    return j


@njit(cache=True)
def _draw(I, F, roots, root_u, total, v):
    pick = -1
    for k in range(roots.size):
        u = root_u[k]
        if u <= 0.0:
            continue
        pick = k
        if v < u:
            break
        v -= u
    if v >= root_u[pick]:
        v = np.random.random() * root_u[pick]
    return _descend(I, F, roots[pick], v)


@njit(cache=True)
def _root_mass(F, roots):
    root_u = np.empty(roots.size)
    total = 0.0
    for k in range(roots.size):
        v = F[roots[k], UCT]
        root_u[k] = v if v > 0.0 else 0.0
        total += root_u[k]
    return root_u, total


@njit(cache=True)
def select_leaves(I, F, roots, n, seed, leaves):
    """``n`` independent root-to-leaf UCT walks (read-only)."""
    np.random.seed(seed)
    root_u, total = _root_mass(F, roots)
    out = np.empty(n, dtype=np.int64)
    for b in range(n):
        if total > 0.0:
            out[b] = _draw(I, F, roots, root_u, total, np.random.random() * total)
        else:
            out[b] = leaves[min(int(np.random.random() * leaves.size), leaves.size - 1)]
    return out


@njit(cache=True)
def form_batch(I, F, free, meta, fmeta, roots, n, seed, min_side, mode, leaves,
               stamp, max_redraws):
    """Select, expand and collect ``n`` batch members.

    mode 0: UCT walk then expand; 1: UCT walk, no expansion (frozen
    partition); 2: uniform over the leaves listed in ``leaves``, then expand.
    A draw that lands on a block already in the batch is redrawn up to
    ``max_redraws`` times and then accepted as a duplicate.
    Returns (members, number of duplicates accepted).
    """
    np.random.seed(seed)
    root_u, total = _root_mass(F, roots)
    uniform = mode == 2 or not total > 0.0
    # First attempts are visited in sorted order so that consecutive walks share
    # path prefixes. Expansion keeps subtree masses, so later walks stay exact.
    first = np.sort(np.random.random(n))
    out = np.empty(n, dtype=np.int64)
    dups = 0
    for b in range(n):
        leaf = -1
        fresh = False
        for r in range(max_redraws):
            u = first[b] if r == 0 else np.random.random()
            if uniform:
                j = leaves[min(int(u * leaves.size), leaves.size - 1)]
                leaf = _descend_uniform(I, j)
            else:
                leaf = _draw(I, F, roots, root_u, total, u * total)
            if I[leaf, MARK] != stamp:
                fresh = True
                break
        if not fresh:
            out[b] = leaf
            dups += 1
            continue
        member = leaf
        if mode != 1:
            k = expand(I, F, free, meta, fmeta, leaf, min_side)
            if k > 0:
                member = I[leaf, CHILD] + min(int(np.random.random() * k), k - 1)
        I[member, MARK] = stamp
        out[b] = member
    return out, dups
