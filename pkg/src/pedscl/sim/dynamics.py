"""Pedestrian steppers: social force model and reciprocal velocity obstacles."""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from .state import SimState


def _rect_closest(pos: np.ndarray, rects: np.ndarray):
    """Closest points on boxes for each position -> (diff (n, m, 2), dist (n, m))."""
    q = np.clip(pos[:, None, :], rects[None, :, :2], rects[None, :, 2:])
    diff = pos[:, None, :] - q
    dist = np.hypot(diff[..., 0], diff[..., 1])
    # centers inside a box: push away from the box center instead
    inside = dist < 1e-12
    if inside.any():
        centers = 0.5 * (rects[:, :2] + rects[:, 2:])
        away = pos[:, None, :] - centers[None]
        norm = np.maximum(np.hypot(away[..., 0], away[..., 1]), 1e-12)
        diff = np.where(inside[..., None], away / norm[..., None] * 1e-12, diff)
        dist = np.where(inside, 1e-12, dist)
    return diff, dist


def clip_speed(vel: np.ndarray, v_max: float) -> np.ndarray:
    speed = np.hypot(vel[:, 0], vel[:, 1])
    scale = np.where(speed > v_max, v_max / np.maximum(speed, 1e-300), 1.0)
    return vel * scale[:, None]


def sfm_forces(pos, vel, goal, v_pref, scenario) -> np.ndarray:
    prm = scenario.sfm
    to_goal = goal - pos
    gdist = np.hypot(to_goal[:, 0], to_goal[:, 1])
    ghat = np.where(gdist[:, None] > 1e-9, to_goal / np.maximum(gdist, 1e-9)[:, None], 0.0)
    acc = (v_pref[:, None] * ghat - vel) / prm.tau

    n = len(pos)
    if n > 1:
        diff = pos[:, None, :] - pos[None, :, :]
        dist = np.hypot(diff[..., 0], diff[..., 1])
        valid = dist > 1e-12
        np.fill_diagonal(valid, False)
        safe = np.where(valid, dist, 1.0)
        mag = np.where(valid, prm.a * np.exp((2 * scenario.radius - safe) / prm.b), 0.0)
        acc = acc + (mag[..., None] * diff / safe[..., None]).sum(axis=1)

    rects = scenario.obstacle_array
    if len(rects):
        diff, dist = _rect_closest(pos, rects)
        near = dist < prm.wall_range
        mag = np.where(near, prm.wall_a * np.exp((scenario.radius - dist) / prm.wall_b), 0.0)
        acc = acc + (mag[..., None] * diff / dist[..., None]).sum(axis=1)
    return acc


def sfm_step(state: SimState, scenario, dt: float) -> SimState:
    """Goal attraction plus exponential pairwise and wall repulsion, semi-implicit Euler."""
    if scenario.stepper != "sfm":
        raise ValueError(f"scenario {scenario.name!r} uses {scenario.stepper}, not sfm")
    out = state.copy()
    act = np.flatnonzero(state.active)
    if len(act):
        acc = sfm_forces(state.pos[act], state.vel[act], state.goal[act], state.v_pref[act], scenario)
        if not np.all(np.isfinite(acc)):
            bad = act[~np.isfinite(acc).all(axis=1)]
            raise FloatingPointError(
                f"non-finite social force at tick {state.tick} for agents {state.ids[bad].tolist()} "
                f"at {state.pos[bad].tolist()}"
            )
        vel = clip_speed(state.vel[act] + acc * dt, scenario.v_max)
        out.vel[act] = vel
        out.pos[act] = state.pos[act] + vel * dt
    out.tick = state.tick + 1
    return out


# --- reciprocal velocity obstacles -------------------------------------------------

_EPS = 1e-9


def _det(a, b) -> float:
    return a[0] * b[1] - a[1] * b[0]


def _lp1(points, dirs, k, radius, opt, direction_opt, result):
    """Optimize along line k subject to lines 0..k-1 and the speed disc."""
    pk, dk = points[k], dirs[k]
    dot = pk @ dk
    disc = dot * dot + radius * radius - pk @ pk
    if disc < 0.0:
        return False
    sq = np.sqrt(disc)
    t_left, t_right = -dot - sq, -dot + sq
    for i in range(k):
        denom = _det(dk, dirs[i])
        numer = _det(dirs[i], pk - points[i])
        if abs(denom) <= _EPS:
            if numer < 0.0:
                return False
            continue
        t = numer / denom
        if denom >= 0.0:
            t_right = min(t_right, t)
        else:
            t_left = max(t_left, t)
        if t_left > t_right:
            return False
    if direction_opt:
        t = t_right if opt @ dk > 0.0 else t_left
    else:
        t = min(max(dk @ (opt - pk), t_left), t_right)
    result[:] = pk + t * dk
    return True


def solve_halfplanes(points, dirs, radius, opt, direction_opt=False):
    """Velocity closest to ``opt`` inside the speed disc and left of every line.

    Returns (index of the first line that could not be satisfied or len(lines), velocity).
    """
    if direction_opt:
        result = opt * radius
    elif opt @ opt > radius * radius:
        result = opt / np.linalg.norm(opt) * radius
    else:
        result = opt.copy()
    for i in range(len(points)):
        if _det(dirs[i], points[i] - result) > 0.0:
            saved = result.copy()
            if not _lp1(points, dirs, i, radius, opt, direction_opt, result):
                return i, saved
    return len(points), result


def orca_line(rel_pos, rel_vel, combined_radius, vel, horizon, dt):
    """Half-plane (point, direction) of velocities avoiding one neighbor, half responsibility."""
    dist_sq = rel_pos @ rel_pos
    r_sq = combined_radius * combined_radius
    if dist_sq > r_sq:
        inv_h = 1.0 / horizon
        w = rel_vel - inv_h * rel_pos
        w_len_sq = w @ w
        dot1 = w @ rel_pos
        if dot1 < 0.0 and dot1 * dot1 > r_sq * w_len_sq:
            w_len = np.sqrt(w_len_sq)
            unit_w = w / w_len
            direction = np.array([unit_w[1], -unit_w[0]])
            u = (combined_radius * inv_h - w_len) * unit_w
        else:
            leg = np.sqrt(dist_sq - r_sq)
            px, py = rel_pos
            if _det(rel_pos, w) > 0.0:
                direction = np.array([px * leg - py * combined_radius, px * combined_radius + py * leg]) / dist_sq
            else:
                direction = -np.array([px * leg + py * combined_radius, -px * combined_radius + py * leg]) / dist_sq
            u = (rel_vel @ direction) * direction - rel_vel
    else:
        inv_dt = 1.0 / dt
        w = rel_vel - inv_dt * rel_pos
        w_len = np.sqrt(w @ w)
        unit_w = w / w_len if w_len > 0 else np.array([1.0, 0.0])
        direction = np.array([unit_w[1], -unit_w[0]])
        u = (combined_radius * inv_dt - w_len) * unit_w
    return vel + 0.5 * u, direction


def obstacle_lines(p, rects, radius, horizon, max_speed):
    """Conservative half-planes for convex boxes: the approach speed toward the
    closest point is capped at (clearance / horizon)."""
    if len(rects) == 0:
        return [], []
    diff, dist = _rect_closest(p[None], rects)
    diff, dist = diff[0], dist[0]
    points, dirs = [], []
    for k in np.argsort(dist, kind="stable"):
        clearance = dist[k] - radius
        if clearance >= max_speed * horizon:
            continue
        n = diff[k] / dist[k]
        points.append(-n * clearance / horizon)
        dirs.append(np.array([n[1], -n[0]]))
    return points, dirs


def _fallback(points, dirs, n_hard, radius, opt, rings, angles):
    """Best sampled velocity: hard lines first, then worst soft violation, then
    distance to the preferred velocity."""
    ang = np.arange(angles) * (2 * np.pi / angles)
    speeds = np.arange(1, rings + 1) * (radius / rings)
    cand = np.concatenate(
        [np.zeros((1, 2)), (speeds[:, None, None] * np.stack([np.cos(ang), np.sin(ang)], -1)[None]).reshape(-1, 2)]
    )
    if opt @ opt <= radius * radius:
        cand = np.concatenate([opt[None], cand])
    P = np.asarray(points)
    D = np.asarray(dirs)
    rel = P[None, :, :] - cand[:, None, :]
    viol = np.maximum(D[None, :, 0] * rel[..., 1] - D[None, :, 1] * rel[..., 0], 0.0)
    hard = viol[:, :n_hard].max(axis=1) if n_hard else np.zeros(len(cand))
    soft = viol[:, n_hard:].max(axis=1) if len(points) > n_hard else np.zeros(len(cand))
    miss = np.hypot(*(cand - opt).T)
    order = np.lexsort((miss, np.round(soft, 12), np.round(hard, 12)))
    return cand[order[0]]


def preferred_velocity(pos, goal, v_pref, dt):
    """Velocity toward ``goal`` at ``v_pref``, slowed to arrive within one step;
    ``dt=None`` keeps full speed."""
    to_goal = goal - pos
    dist = np.hypot(to_goal[:, 0], to_goal[:, 1])
    speed = v_pref if dt is None else np.minimum(v_pref, dist / dt)
    return np.where(dist[:, None] > 1e-9, to_goal / np.maximum(dist, 1e-9)[:, None] * speed[:, None], 0.0)


def _segments_blocked(a, b, rects):
    """(n,) True where segment a[k] -> b[k] passes through the interior of any box."""
    if len(rects) == 0:
        return np.zeros(len(a), dtype=bool)
    d = (b - a)[:, None, :]
    a = a[:, None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        t0 = (rects[None, :, :2] - a) / d
        t1 = (rects[None, :, 2:] - a) / d
    lo, hi = np.minimum(t0, t1), np.maximum(t0, t1)
    # axis-parallel segments: inside the slab on that axis or never
    flat = np.abs(d) < 1e-12
    inside = (a > rects[None, :, :2]) & (a < rects[None, :, 2:])
    lo = np.where(flat, np.where(inside, -np.inf, np.inf), lo)
    hi = np.where(flat, np.where(inside, np.inf, -np.inf), hi)
    enter = np.maximum(lo.max(axis=-1), 0.0)
    leave = np.minimum(hi.min(axis=-1), 1.0)
    return (leave - enter > 1e-9).any(axis=1)


@lru_cache(maxsize=32)
def _roadmap(rect_key: tuple, radius: float, margin: float):
    """Corner nodes of the boxes grown by radius + margin, their visibility
    blocking boxes (grown by radius only) and all-pairs shortest distances."""
    rects = np.asarray(rect_key, dtype=float).reshape(-1, 4)
    grow = radius + margin
    corners = np.concatenate([
        np.stack([rects[:, 0] - grow, rects[:, 1] - grow], -1),
        np.stack([rects[:, 2] + grow, rects[:, 1] - grow], -1),
        np.stack([rects[:, 2] + grow, rects[:, 3] + grow], -1),
        np.stack([rects[:, 0] - grow, rects[:, 3] + grow], -1),
    ])
    block = rects + np.array([-radius, -radius, radius, radius])
    free = ~((corners[:, None, :] > block[None, :, :2] - margin / 2)
             & (corners[:, None, :] < block[None, :, 2:] + margin / 2)).all(-1).any(-1)
    nodes = corners[free]
    m = len(nodes)
    ii, jj = np.triu_indices(m, 1)
    dist = np.full((m, m), np.inf)
    np.fill_diagonal(dist, 0.0)
    if m > 1:
        seen = ~_segments_blocked(nodes[ii], nodes[jj], block)
        length = np.hypot(*(nodes[ii] - nodes[jj]).T)
        dist[ii[seen], jj[seen]] = length[seen]
        dist[jj[seen], ii[seen]] = length[seen]
    for k in range(m):
        dist = np.minimum(dist, dist[:, k : k + 1] + dist[k : k + 1, :])
    return nodes, block, dist


def route_targets(pos, goal, rects, radius, margin=0.3):
    """Next point to walk toward: the goal when it is in sight, otherwise the first
    corner of the shortest path around the grown boxes. Unreachable goals are
    approached directly."""
    target = goal.copy()
    if len(rects) == 0:
        return target
    nodes, block, dist = _roadmap(tuple(map(float, np.ravel(rects))), float(radius), float(margin))
    direct = ~_segments_blocked(pos, goal, block)
    m = len(nodes)
    if m == 0:
        return target
    for i in np.flatnonzero(~direct):
        src = np.repeat(pos[i][None], m, 0)
        dst = np.repeat(goal[i][None], m, 0)
        from_pos = np.where(_segments_blocked(src, nodes, block), np.inf, np.hypot(*(nodes - pos[i]).T))
        to_goal = np.where(_segments_blocked(nodes, dst, block), np.inf, np.hypot(*(nodes - goal[i]).T))
        via = from_pos + (dist + to_goal[None, :]).min(axis=1)
        k = int(np.argmin(via))
        if np.isfinite(via[k]):
            target[i] = nodes[k]
    return target


def rvo_step(state: SimState, scenario, dt: float) -> SimState:
    """Each agent takes the velocity closest to its preferred one outside every
    neighbor and obstacle half-plane; infeasible programs fall back to sampling."""
    if scenario.stepper != "rvo":
        raise ValueError(f"scenario {scenario.name!r} uses {scenario.stepper}, not rvo")
    prm = scenario.rvo
    out = state.copy()
    act = np.flatnonzero(state.active)
    if len(act) == 0:
        out.tick = state.tick + 1
        return out
    pos, vel = state.pos[act], state.vel[act]
    rects = scenario.obstacle_array
    goal = state.goal[act]
    target = route_targets(pos, goal, rects, scenario.radius)
    raw_pref = preferred_velocity(pos, target, state.v_pref[act], dt)
    # full speed toward intermediate corners, slowing down only at the goal
    detour = np.any(target != goal, axis=1)
    if detour.any():
        raw_pref[detour] = preferred_velocity(pos[detour], target[detour], state.v_pref[act][detour], None)
    pref = raw_pref
    # shared tie-break: rotate every preferred velocity slightly to the right-hand side
    c, s = np.cos(-prm.tie_break), np.sin(-prm.tie_break)
    pref = pref @ np.array([[c, s], [-s, c]])
    radius = scenario.radius + prm.safety_margin
    new_vel = np.zeros_like(vel)
    for i in range(len(act)):
        max_speed = max(float(state.v_pref[act[i]]), float(np.hypot(*pref[i])))
        points, dirs = obstacle_lines(pos[i], rects, scenario.radius + 1e-6, prm.obstacle_horizon, max_speed)
        n_hard = len(points)
        rel_all = pos - pos[i]
        d_all = np.hypot(rel_all[:, 0], rel_all[:, 1])
        order = [j for j in np.argsort(d_all, kind="stable") if j != i and d_all[j] < prm.neighbor_dist]
        for j in order[: prm.max_neighbors]:
            p, d = orca_line(rel_all[j], vel[i] - vel[j], 2 * radius, vel[i], prm.time_horizon, dt)
            points.append(p)
            dirs.append(d)
        if not points:
            new_vel[i] = raw_pref[i]
            continue
        fail, v = solve_halfplanes(points, dirs, max_speed, pref[i])
        if fail < len(points):
            v = _fallback(points, dirs, n_hard, max_speed, pref[i], prm.fallback_rings, prm.fallback_angles)
        new_vel[i] = v
    new_vel = clip_speed(new_vel, scenario.v_max)
    if not np.all(np.isfinite(new_vel)):
        raise FloatingPointError(f"non-finite RVO velocity at tick {state.tick}")
    out.vel[act] = new_vel
    out.pos[act] = pos + new_vel * dt
    out.tick = state.tick + 1
    return out
