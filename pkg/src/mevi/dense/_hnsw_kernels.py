"""Compiled graph routines for the HNSW index.

Graph storage is flat so that numba can work on it directly:

* ``nbr0[i, :cnt0[i]]`` are the layer-0 neighbours of node ``i``.
* Nodes with level >= 1 own a row ``slot[i]`` in ``nbru``/``cntu``; layer ``l``
  neighbours are ``nbru[slot[i], l - 1, :cntu[slot[i], l - 1]]``.

Distances are "smaller is closer": squared L2 for ``METRIC_L2`` and the
negated inner product for ``METRIC_IP`` (cosine is IP on normalised rows).
"""

import heapq

import numpy as np
from numba import njit

METRIC_L2 = 0
METRIC_IP = 1


@njit(cache=True, nogil=True, fastmath=True)
def _dist_vec(data, j, q, metric):
    acc = np.float32(0.0)
    if metric == METRIC_L2:
        for t in range(q.shape[0]):
            diff = data[j, t] - q[t]
            acc += diff * diff
        return np.float64(acc)
    for t in range(q.shape[0]):
        acc += data[j, t] * q[t]
    return -np.float64(acc)


@njit(cache=True, nogil=True)
def _neighbors(i, layer, nbr0, cnt0, slot, nbru, cntu):
    if layer == 0:
        return nbr0[i, : cnt0[i]]
    s = slot[i]
    return nbru[s, layer - 1, : cntu[s, layer - 1]]


@njit(cache=True, nogil=True)
def _greedy_closest(data, q, ep, ep_dist, layer, metric, nbr0, cnt0, slot, nbru, cntu):
    changed = True
    while changed:
        changed = False
        nb = _neighbors(ep, layer, nbr0, cnt0, slot, nbru, cntu)
        for t in range(nb.shape[0]):
            j = np.int64(nb[t])
            dj = _dist_vec(data, j, q, metric)
            if dj < ep_dist:
                ep_dist = dj
                ep = j
                changed = True
    return ep, ep_dist


@njit(cache=True, nogil=True)
def _search_layer(data, q, ep, ep_dist, ef, layer, metric, nbr0, cnt0, slot, nbru, cntu,
                  visited, tag, live):
    """Best-first search on one layer. Returns (dists, ids) sorted ascending.

    Only nodes with ``live[i]`` are admitted to the result set; every node is
    still traversed so tombstones do not disconnect the graph.
    """
    visited[ep] = tag
    cand = [(ep_dist, ep)]
    res = [(-ep_dist, ep)]
    res.pop()
    if live[ep]:
        res.append((-ep_dist, ep))
    while len(cand) > 0:
        d_c, c = heapq.heappop(cand)
        if len(res) >= ef and d_c > -res[0][0]:
            break
        nb = _neighbors(c, layer, nbr0, cnt0, slot, nbru, cntu)
        for t in range(nb.shape[0]):
            j = np.int64(nb[t])
            if visited[j] == tag:
                continue
            visited[j] = tag
            dj = _dist_vec(data, j, q, metric)
            if len(res) < ef or dj < -res[0][0]:
                heapq.heappush(cand, (dj, j))
                if live[j]:
                    heapq.heappush(res, (-dj, j))
                    if len(res) > ef:
                        heapq.heappop(res)
    n = len(res)
    out_d = np.empty(n, dtype=np.float64)
    out_i = np.empty(n, dtype=np.int64)
    for t in range(n):
        nd, j = res[t]
        out_d[t] = -nd
        out_i[t] = j
    order = np.argsort(out_d, kind="mergesort")
    return out_d[order], out_i[order]


@njit(cache=True, nogil=True)
def _select_heuristic(data, cand_d, cand_i, max_m, metric):
    """Keep a candidate only if it is closer to the base than to every kept one."""
    keep = np.empty(max_m, dtype=np.int64)
    n_keep = 0
    for t in range(cand_i.shape[0]):
        if n_keep >= max_m:
            break
        e = cand_i[t]
        good = True
        for s in range(n_keep):
            if _dist_vec(data, keep[s], data[e], metric) < cand_d[t]:
                good = False
                break
        if good:
            keep[n_keep] = e
            n_keep += 1
    return keep[:n_keep]


@njit(cache=True, nogil=True)
def _set_neighbors(i, layer, ids, nbr0, cnt0, slot, nbru, cntu):
    if layer == 0:
        nbr0[i, : ids.shape[0]] = ids
        cnt0[i] = ids.shape[0]
    else:
        s = slot[i]
        nbru[s, layer - 1, : ids.shape[0]] = ids
        cntu[s, layer - 1] = ids.shape[0]


@njit(cache=True, nogil=True)
def _link_back(data, e, new, layer, max_m, metric, nbr0, cnt0, slot, nbru, cntu):
    nb = _neighbors(e, layer, nbr0, cnt0, slot, nbru, cntu)
    n = nb.shape[0]
    for t in range(n):
        if nb[t] == new:
            return
    if n < max_m:
        if layer == 0:
            nbr0[e, n] = new
            cnt0[e] = n + 1
        else:
            s = slot[e]
            nbru[s, layer - 1, n] = new
            cntu[s, layer - 1] = n + 1
        return
    # overflow: re-prune the neighbour list of e with the heuristic
    cd = np.empty(n + 1, dtype=np.float64)
    ci = np.empty(n + 1, dtype=np.int64)
    for t in range(n):
        ci[t] = nb[t]
        cd[t] = _dist_vec(data, nb[t], data[e], metric)
    ci[n] = new
    cd[n] = _dist_vec(data, new, data[e], metric)
    order = np.argsort(cd, kind="mergesort")
    kept = _select_heuristic(data, cd[order], ci[order], max_m, metric)
    _set_neighbors(e, layer, kept, nbr0, cnt0, slot, nbru, cntu)


@njit(cache=True, nogil=True)
def insert_many(data, start, stop, levels, state, m, m0, ef_construction, metric,
                nbr0, cnt0, slot, nbru, cntu, visited, live):
    """Insert nodes ``start..stop-1`` whose vectors are already in ``data``.

    ``state`` holds ``[entry_point, max_level, visit_tag]`` and is updated in place.
    """
    for i in range(start, stop):
        level = levels[i]
        q = data[i]
        entry = state[0]
        if entry < 0:
            state[0] = i
            state[1] = level
            continue
        max_level = state[1]
        ep = entry
        ep_dist = _dist_vec(data, ep, q, metric)
        for layer in range(max_level, level, -1):
            ep, ep_dist = _greedy_closest(data, q, ep, ep_dist, layer, metric,
                                          nbr0, cnt0, slot, nbru, cntu)
        for layer in range(min(level, max_level), -1, -1):
            state[2] += 1
            cd, ci = _search_layer(data, q, ep, ep_dist, ef_construction, layer, metric,
                                   nbr0, cnt0, slot, nbru, cntu, visited, state[2], live)
            # candidates exclude i itself: it is not linked yet
            max_m = m0 if layer == 0 else m
            sel = _select_heuristic(data, cd, ci, m, metric)
            _set_neighbors(i, layer, sel, nbr0, cnt0, slot, nbru, cntu)
            for e in sel:
                _link_back(data, e, i, layer, max_m, metric, nbr0, cnt0, slot, nbru, cntu)
            if cd.shape[0] > 0:
                ep = ci[0]
                ep_dist = cd[0]
        if level > max_level:
            state[0] = i
            state[1] = level


@njit(cache=True, nogil=True)
def search(data, q, k, ef, state, metric, nbr0, cnt0, slot, nbru, cntu, visited, tag, live):
    entry = state[0]
    ep = entry
    ep_dist = _dist_vec(data, ep, q, metric)
    for layer in range(state[1], 0, -1):
        ep, ep_dist = _greedy_closest(data, q, ep, ep_dist, layer, metric,
                                      nbr0, cnt0, slot, nbru, cntu)
    cd, ci = _search_layer(data, q, ep, ep_dist, max(ef, k), 0, metric,
                           nbr0, cnt0, slot, nbru, cntu, visited, tag, live)
    return cd[:k], ci[:k]
