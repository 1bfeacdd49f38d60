"""Numba kernels shared by the public API and the hot ensemble path.

Everything operates on plain float64 scalars/arrays so the same math backs
both the friendly wrappers (geometry/field/moment/carrier modules) and the
compiled nested-integration loop in `experiment`.
"""

import math

import numpy as np
from numba import njit, prange

MU0 = 4.0e-7 * math.pi
_INV4PI = 1.0 / (4.0 * math.pi)
TWO_PI = 2.0 * math.pi

#: |sin phi| below this is treated as singular (theta'' blows up)
EPS_SING = 1.0e-3
#: relative |mu x B| threshold for the degenerate torque axis
EPS_AXIS = 1.0e-12
#: working frame is switched once sin^2(phi) drops below this; the other
#: frame is then guaranteed sin^2 >= 0.6 (sin^2_lab + sin^2_rot >= 1)
FRAME_SWITCH_SIN2 = 0.4
#: |B| below this falls back to the gap-field axis (-z) for beta
B_FLOOR = 1.0e-15
#: sentinel drive ratio when B_z = 0
DRIVE_INF = np.inf

QUAD_OK = 0
QUAD_NO_CONVERGENCE = 1
QUAD_BUDGET = 2

# run flag bits (decoded by experiment.decode_flags)
FLAG_OUT_OF_BOUNDS = 1
FLAG_STEP_REJECTED = 2
FLAG_NON_FORWARD = 4
FLAG_QUADRATURE = 8
FLAG_STEP_CAP = 16
FLAG_ZERO_FIELD = 32
FLAG_SINGULAR = 64

# torque model kinds
TMM_CLASSICAL = 0
TMM_SEMICLASSICAL_TANH = 1
TMM_TABLE = 2

# force model kinds
FORCE_FULL = 0
FORCE_DRIFT_AWARE = 1
FORCE_Z_ONLY = 2

# field source modes
FIELD_GRID = 0
FIELD_DIRECT = 1
FIELD_UNIFORM = 2

CLASS_UP = 0
CLASS_DOWN = 1
CLASS_UNRESOLVED = 2


# --------------------------------------------------------------------------
# adaptive Biot-Savart panel quadrature
# --------------------------------------------------------------------------

@njit(cache=True, inline="always")
def _tri_geom(ax, ay, az, bx, by, bz, cx, cy, cz):
    """(area, max_edge_sq, centroid) of a triangle."""
    ux, uy, uz = bx - ax, by - ay, bz - az
    vx, vy, vz = cx - ax, cy - ay, cz - az
    qx = uy * vz - uz * vy
    qy = uz * vx - ux * vz
    qz = ux * vy - uy * vx
    area = 0.5 * math.sqrt(qx * qx + qy * qy + qz * qz)
    wx, wy, wz = cx - bx, cy - by, cz - bz
    e1 = ux * ux + uy * uy + uz * uz
    e2 = wx * wx + wy * wy + wz * wz
    e3 = vx * vx + vy * vy + vz * vz
    d2 = e1
    if e2 > d2:
        d2 = e2
    if e3 > d2:
        d2 = e3
    gx = (ax + bx + cx) / 3.0
    gy = (ay + by + cy) / 3.0
    gz = (az + bz + cz) / 3.0
    return area, d2, gx, gy, gz


@njit(cache=True, inline="always")
def _tri_rule3(ax, ay, az, bx, by, bz, cx, cy, cz,
               kx, ky, kz, px, py, pz):
    """Degree-2 midpoint rule for K x (p - r') / |p - r'|^3 over a triangle."""
    ux, uy, uz = bx - ax, by - ay, bz - az
    vx, vy, vz = cx - ax, cy - ay, cz - az
    qx = uy * vz - uz * vy
    qy = uz * vx - ux * vz
    qz = ux * vy - uy * vx
    area = 0.5 * math.sqrt(qx * qx + qy * qy + qz * qz)
    sx = 0.0
    sy = 0.0
    sz = 0.0
    for corner in range(3):
        if corner == 0:
            mx, my, mz = 0.5 * (ax + bx), 0.5 * (ay + by), 0.5 * (az + bz)
        elif corner == 1:
            mx, my, mz = 0.5 * (bx + cx), 0.5 * (by + cy), 0.5 * (bz + cz)
        else:
            mx, my, mz = 0.5 * (cx + ax), 0.5 * (cy + ay), 0.5 * (cz + az)
        dx, dy, dz = px - mx, py - my, pz - mz
        r2 = dx * dx + dy * dy + dz * dz
        if r2 < 1.0e-300:
            continue
        inv = 1.0 / (r2 * math.sqrt(r2))
        sx += (ky * dz - kz * dy) * inv
        sy += (kz * dx - kx * dz) * inv
        sz += (kx * dy - ky * dx) * inv
    w = area / 3.0
    return sx * w, sy * w, sz * w


@njit(cache=True)
def _panel_field(tri, kx, ky, kz, px, py, pz, rel_tol, max_depth):
    """Adaptive quadtree integration of one current-carrying triangle.

    Returns (Bx, By, Bz, err_bound, status). Subdivision is forced while a
    node's diameter exceeds its distance to the evaluation point; otherwise
    a node is accepted once the coarse/fine disagreement fits an absolute
    budget proportional to its share of the panel area.
    """
    ax0, ay0, az0 = tri[0, 0], tri[0, 1], tri[0, 2]
    bx0, by0, bz0 = tri[1, 0], tri[1, 1], tri[1, 2]
    cx0, cy0, cz0 = tri[2, 0], tri[2, 1], tri[2, 2]

    kmag = math.sqrt(kx * kx + ky * ky + kz * kz)
    area0, _, gx, gy, gz = _tri_geom(ax0, ay0, az0, bx0, by0, bz0, cx0, cy0, cz0)
    if area0 <= 0.0 or kmag == 0.0:
        return 0.0, 0.0, 0.0, 0.0, QUAD_OK
    q0x, q0y, q0z = _tri_rule3(ax0, ay0, az0, bx0, by0, bz0, cx0, cy0, cz0,
                               kx, ky, kz, px, py, pz)
    dgx, dgy, dgz = px - gx, py - gy, pz - gz
    d2c = dgx * dgx + dgy * dgy + dgz * dgz
    quick = MU0 * _INV4PI * math.sqrt(q0x * q0x + q0y * q0y + q0z * q0z)
    # a-priori magnitude scale; saturates near the sheet
    fallback = MU0 * _INV4PI * kmag * area0 / (d2c + area0)
    scale = quick if quick > fallback else fallback
    tol_abs = rel_tol * scale / (MU0 * _INV4PI)  # budgets in raw-integral units

    cap = 4 * max_depth + 8
    sv = np.empty((cap, 9))
    sval = np.empty((cap, 3))
    sdepth = np.empty(cap, np.int64)

    sv[0, 0], sv[0, 1], sv[0, 2] = ax0, ay0, az0
    sv[0, 3], sv[0, 4], sv[0, 5] = bx0, by0, bz0
    sv[0, 6], sv[0, 7], sv[0, 8] = cx0, cy0, cz0
    sval[0, 0], sval[0, 1], sval[0, 2] = q0x, q0y, q0z
    sdepth[0] = 0
    top = 1

    accx = 0.0
    accy = 0.0
    accz = 0.0
    err_acc = 0.0
    status = QUAD_OK
    processed = 0
    max_nodes = 200000

    while top > 0:
        top -= 1
        ax, ay, az = sv[top, 0], sv[top, 1], sv[top, 2]
        bx, by, bz = sv[top, 3], sv[top, 4], sv[top, 5]
        cx, cy, cz = sv[top, 6], sv[top, 7], sv[top, 8]
        vx0, vy0, vz0 = sval[top, 0], sval[top, 1], sval[top, 2]
        depth = sdepth[top]
        processed += 1

        mabx, maby, mabz = 0.5 * (ax + bx), 0.5 * (ay + by), 0.5 * (az + bz)
        mbcx, mbcy, mbcz = 0.5 * (bx + cx), 0.5 * (by + cy), 0.5 * (bz + cz)
        mcax, mcay, mcaz = 0.5 * (cx + ax), 0.5 * (cy + ay), 0.5 * (cz + az)

        c0x, c0y, c0z = _tri_rule3(ax, ay, az, mabx, maby, mabz, mcax, mcay, mcaz,
                                   kx, ky, kz, px, py, pz)
        c1x, c1y, c1z = _tri_rule3(mabx, maby, mabz, bx, by, bz, mbcx, mbcy, mbcz,
                                   kx, ky, kz, px, py, pz)
        c2x, c2y, c2z = _tri_rule3(mcax, mcay, mcaz, mbcx, mbcy, mbcz, cx, cy, cz,
                                   kx, ky, kz, px, py, pz)
        c3x, c3y, c3z = _tri_rule3(mabx, maby, mabz, mbcx, mbcy, mbcz, mcax, mcay, mcaz,
                                   kx, ky, kz, px, py, pz)
        fx = c0x + c1x + c2x + c3x
        fy = c0y + c1y + c2y + c3y
        fz = c0z + c1z + c2z + c3z
        ex, ey, ez = fx - vx0, fy - vy0, fz - vz0
        err = math.sqrt(ex * ex + ey * ey + ez * ez)

        _, diam2, ngx, ngy, ngz = _tri_geom(ax, ay, az, bx, by, bz, cx, cy, cz)
        ddx, ddy, ddz = px - ngx, py - ngy, pz - ngz
        dist2 = ddx * ddx + ddy * ddy + ddz * ddz
        near = diam2 > dist2
        # flat local budget: accepted-node errors concentrate at the accept
        # threshold only near the field point, so the achieved global error
        # stays at a small multiple of tol_abs
        budget = 0.25 * tol_abs

        if depth >= max_depth or processed > max_nodes:
            accx += fx
            accy += fy
            accz += fz
            err_acc += err
            if near or err > budget:
                new_status = QUAD_NO_CONVERGENCE if processed <= max_nodes else QUAD_BUDGET
                if new_status > status:
                    status = new_status
        elif near or err > budget:
            sv[top, 0], sv[top, 1], sv[top, 2] = ax, ay, az
            sv[top, 3], sv[top, 4], sv[top, 5] = mabx, maby, mabz
            sv[top, 6], sv[top, 7], sv[top, 8] = mcax, mcay, mcaz
            sval[top, 0], sval[top, 1], sval[top, 2] = c0x, c0y, c0z
            sdepth[top] = depth + 1
            top += 1
            sv[top, 0], sv[top, 1], sv[top, 2] = mabx, maby, mabz
            sv[top, 3], sv[top, 4], sv[top, 5] = bx, by, bz
            sv[top, 6], sv[top, 7], sv[top, 8] = mbcx, mbcy, mbcz
            sval[top, 0], sval[top, 1], sval[top, 2] = c1x, c1y, c1z
            sdepth[top] = depth + 1
            top += 1
            sv[top, 0], sv[top, 1], sv[top, 2] = mcax, mcay, mcaz
            sv[top, 3], sv[top, 4], sv[top, 5] = mbcx, mbcy, mbcz
            sv[top, 6], sv[top, 7], sv[top, 8] = cx, cy, cz
            sval[top, 0], sval[top, 1], sval[top, 2] = c2x, c2y, c2z
            sdepth[top] = depth + 1
            top += 1
            sv[top, 0], sv[top, 1], sv[top, 2] = mabx, maby, mabz
            sv[top, 3], sv[top, 4], sv[top, 5] = mbcx, mbcy, mbcz
            sv[top, 6], sv[top, 7], sv[top, 8] = mcax, mcay, mcaz
            sval[top, 0], sval[top, 1], sval[top, 2] = c3x, c3y, c3z
            sdepth[top] = depth + 1
            top += 1
        else:
            accx += fx
            accy += fy
            accz += fz
            err_acc += err

    f = MU0 * _INV4PI
    return accx * f, accy * f, accz * f, err_acc * f, status


@njit(cache=True)
def bs_field(tris, currents, px, py, pz, rel_tol, max_depth):
    """B at a point from all current-carrying triangles.

    Returns (B[3], err_bound, status); status is the worst panel status.
    """
    out = np.zeros(3)
    err = 0.0
    status = QUAD_OK
    for i in range(tris.shape[0]):
        bx, by, bz, e, st = _panel_field(
            tris[i], currents[i, 0], currents[i, 1], currents[i, 2],
            px, py, pz, rel_tol, max_depth)
        out[0] += bx
        out[1] += by
        out[2] += bz
        err += e
        if st > status:
            status = st
    return out, err, status


@njit(cache=True, inline="always")
def _point_tri_dist2(px, py, pz, ax, ay, az, bx, by, bz, cx, cy, cz):
    """Squared distance from a point to a triangle (Ericson's algorithm)."""
    abx, aby, abz = bx - ax, by - ay, bz - az
    acx, acy, acz = cx - ax, cy - ay, cz - az
    apx, apy, apz = px - ax, py - ay, pz - az
    d1 = abx * apx + aby * apy + abz * apz
    d2 = acx * apx + acy * apy + acz * apz
    if d1 <= 0.0 and d2 <= 0.0:
        return apx * apx + apy * apy + apz * apz
    bpx, bpy, bpz = px - bx, py - by, pz - bz
    d3 = abx * bpx + aby * bpy + abz * bpz
    d4 = acx * bpx + acy * bpy + acz * bpz
    if d3 >= 0.0 and d4 <= d3:
        return bpx * bpx + bpy * bpy + bpz * bpz
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        v = d1 / (d1 - d3)
        qx, qy, qz = apx - v * abx, apy - v * aby, apz - v * abz
        return qx * qx + qy * qy + qz * qz
    cpx, cpy, cpz = px - cx, py - cy, pz - cz
    d5 = abx * cpx + aby * cpy + abz * cpz
    d6 = acx * cpx + acy * cpy + acz * cpz
    if d6 >= 0.0 and d5 <= d6:
        return cpx * cpx + cpy * cpy + cpz * cpz
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        w = d2 / (d2 - d6)
        qx, qy, qz = apx - w * acx, apy - w * acy, apz - w * acz
        return qx * qx + qy * qy + qz * qz
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        qx = px - (bx + w * (cx - bx))
        qy = py - (by + w * (cy - by))
        qz = pz - (bz + w * (cz - bz))
        return qx * qx + qy * qy + qz * qz
    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    qx = px - (ax + abx * v + acx * w)
    qy = py - (ay + aby * v + acy * w)
    qz = pz - (az + abz * v + acz * w)
    return qx * qx + qy * qy + qz * qz


@njit(cache=True)
def surface_distance(tris_all, px, py, pz):
    """Distance from a point to the nearest panel triangle."""
    best = 1.0e300
    for i in range(tris_all.shape[0]):
        d2 = _point_tri_dist2(
            px, py, pz,
            tris_all[i, 0, 0], tris_all[i, 0, 1], tris_all[i, 0, 2],
            tris_all[i, 1, 0], tris_all[i, 1, 1], tris_all[i, 1, 2],
            tris_all[i, 2, 0], tris_all[i, 2, 1], tris_all[i, 2, 2])
        if d2 < best:
            best = d2
    return math.sqrt(best)


@njit(cache=True, inline="always")
def fd_step(dist_to_surface):
    """Central-difference step for the jacobian: balances quadrature noise
    against truncation."""
    d = 1.0e-4 * dist_to_surface
    return d if d > 1.0e-6 else 1.0e-6


@njit(cache=True)
def bs_jacobian(tris, currents, px, py, pz, delta, stencil_tol, max_depth):
    """dB_i/dx_j by central differences over bs_field.

    `stencil_tol` is the quadrature tolerance for the six stencil fields;
    precision callers tighten it below the field tolerance so the
    1/(2 delta) differencing does not amplify quadrature noise."""
    jac = np.empty((3, 3))
    err = 0.0
    status = QUAD_OK
    for j in range(3):
        dx = delta if j == 0 else 0.0
        dy = delta if j == 1 else 0.0
        dz = delta if j == 2 else 0.0
        bp, ep, sp_ = bs_field(tris, currents, px + dx, py + dy, pz + dz,
                               stencil_tol, max_depth)
        bm, em, sm_ = bs_field(tris, currents, px - dx, py - dy, pz - dz,
                               stencil_tol, max_depth)
        inv = 1.0 / (2.0 * delta)
        jac[0, j] = (bp[0] - bm[0]) * inv
        jac[1, j] = (bp[1] - bm[1]) * inv
        jac[2, j] = (bp[2] - bm[2]) * inv
        e = (ep + em) * inv
        if e > err:
            err = e
        if sp_ > status:
            status = sp_
        if sm_ > status:
            status = sm_
    return jac, err, status


@njit(cache=True, parallel=True)
def fill_grid(tris, currents, tris_all, origin, spacing, dims, rel_tol, max_depth):
    """Fill every grid node with B plus jacobian (x-fastest node order)."""
    nx, ny, nz = dims[0], dims[1], dims[2]
    ntot = nx * ny * nz
    data = np.empty((ntot, 12))
    status = np.zeros(ntot, np.int64)
    for idx in prange(ntot):
        ix = idx % nx
        iy = (idx // nx) % ny
        iz = idx // (nx * ny)
        px = origin[0] + ix * spacing[0]
        py = origin[1] + iy * spacing[1]
        pz = origin[2] + iz * spacing[2]
        dist = surface_distance(tris_all, px, py, pz)
        delta = fd_step(dist)
        b, e1, s1 = bs_field(tris, currents, px, py, pz, rel_tol, max_depth)
        jac, e2, s2 = bs_jacobian(tris, currents, px, py, pz, delta,
                                  rel_tol, max_depth)
        data[idx, 0] = b[0]
        data[idx, 1] = b[1]
        data[idx, 2] = b[2]
        for i in range(3):
            for j in range(3):
                data[idx, 3 + 3 * i + j] = jac[i, j]
        status[idx] = s1 if s1 > s2 else s2
    return data, status


# --------------------------------------------------------------------------
# trilinear grid sampling
# --------------------------------------------------------------------------

@njit(cache=True, inline="always")
def _cell_coord(u, n):
    """(index, fraction, ok) along one axis; snaps to nodes so samples at
    node positions reproduce stored values exactly."""
    if u < -1.0e-9 or u > (n - 1) + 1.0e-9:
        return 0, 0.0, False
    i = int(math.floor(u))
    if i < 0:
        i = 0
    if i > n - 2:
        i = n - 2
    f = u - i
    if f < 1.0e-9:
        f = 0.0
    elif f > 1.0 - 1.0e-9:
        f = 1.0
    return i, f, True


@njit(cache=True)
def grid_sample(data, origin, spacing, dims, px, py, pz, out):
    """Trilinear blend of the 12 stored components into `out`. Returns
    False when the point is outside the grid."""
    nx, ny, nz = dims[0], dims[1], dims[2]
    ix, fx, okx = _cell_coord((px - origin[0]) / spacing[0], nx)
    iy, fy, oky = _cell_coord((py - origin[1]) / spacing[1], ny)
    iz, fz, okz = _cell_coord((pz - origin[2]) / spacing[2], nz)
    if not (okx and oky and okz):
        return False
    gx = 1.0 - fx
    gy = 1.0 - fy
    gz = 1.0 - fz
    base = (iz * ny + iy) * nx + ix
    sx = 1
    sy = nx
    sz = nx * ny
    for c in range(12):
        v = (gz * (gy * (gx * data[base, c] + fx * data[base + sx, c])
                   + fy * (gx * data[base + sy, c] + fx * data[base + sy + sx, c]))
             + fz * (gy * (gx * data[base + sz, c] + fx * data[base + sz + sx, c])
                     + fy * (gx * data[base + sz + sy, c]
                             + fx * data[base + sz + sy + sx, c])))
        out[c] = v
    return True


# --------------------------------------------------------------------------
# torque magnitude models and the moment equations of motion
# --------------------------------------------------------------------------

@njit(cache=True, inline="always")
def tmm_eval(kind, c, tab_x, tab_coef, beta_angle):
    """Torque magnitude model TMM(beta); sign included (positive rotates the
    moment toward the field)."""
    if kind == TMM_CLASSICAL:
        return math.sin(beta_angle)
    elif kind == TMM_SEMICLASSICAL_TANH:
        return -math.sin(beta_angle) * math.tanh(c * (beta_angle - 0.5 * math.pi))
    else:
        n = tab_x.shape[0]
        if beta_angle <= tab_x[0]:
            i = 0
        elif beta_angle >= tab_x[n - 1]:
            i = n - 2
        else:
            lo = 0
            hi = n - 1
            while hi - lo > 1:
                mid = (lo + hi) // 2
                if tab_x[mid] <= beta_angle:
                    lo = mid
                else:
                    hi = mid
            i = lo
        t = beta_angle - tab_x[i]
        return ((tab_coef[0, i] * t + tab_coef[1, i]) * t + tab_coef[2, i]) * t + tab_coef[3, i]


@njit(cache=True, inline="always")
def eom_rhs_core(phi, theta, phidot, thetadot, bx, by, bz,
                 mu, inertia, damping, kind, c, tab_x, tab_coef):
    """(phi_dd, theta_dd, singular) from the closed-form equations of motion.

    This is the 2x2 solve of I*alpha = tau (tau = mu*B*TMM(beta)*n_hat
    - b*omega) with the removable cos(phi) factor cancelled analytically,
    so the only true singularity left is sin(phi) = 0.
    """
    sp = math.sin(phi)
    cp = math.cos(phi)
    if abs(sp) < EPS_SING:
        return 0.0, 0.0, True
    st = math.sin(theta)
    ct = math.cos(theta)
    ft_phi = 0.0
    ft_theta = 0.0
    b2 = bx * bx + by * by + bz * bz
    if b2 > 0.0:
        bmag = math.sqrt(b2)
        u = (bx * sp * ct + by * sp * st + bz * cp) / bmag
        if u > 1.0:
            u = 1.0
        elif u < -1.0:
            u = -1.0
        beta_angle = math.acos(u)
        tmm = tmm_eval(kind, c, tab_x, tab_coef, beta_angle)
        # torque axis numerator: unit moment direction crossed with B
        axx = sp * st * bz - cp * by
        axy = cp * bx - sp * ct * bz
        axz = sp * ct * by - sp * st * bx
        dmag = math.sqrt(axx * axx + axy * axy + axz * axz)
        if dmag > EPS_AXIS * bmag:
            f = mu * bmag * tmm / dmag
            ft_phi = f * (cp * (bx * ct + by * st) - bz * sp)
            ft_theta = -f * (bx * st - by * ct) / sp
    phidd = (ft_phi - damping * phidot) / inertia + thetadot * thetadot * sp * cp
    thetadd = (ft_theta - damping * thetadot) / inertia - 2.0 * thetadot * phidot * cp / sp
    return phidd, thetadd, False


@njit(cache=True, inline="always")
def _wrap_theta(theta):
    # Python-style % keeps the result in [0, 2*pi)
    return theta % TWO_PI


@njit(cache=True, inline="always")
def rk4_fast_step(phi, theta, phidot, thetadot, bx, by, bz,
                  mu, inertia, damping, kind, c, tab_x, tab_coef, dt):
    """One classical RK4 step of (phi, theta, phi_dot, theta_dot) with B
    held fixed. Returns the new state plus a status code:
    0 ok, 1 singular orientation, 2 step rejected."""
    a1, b1, s1 = eom_rhs_core(phi, theta, phidot, thetadot, bx, by, bz,
                              mu, inertia, damping, kind, c, tab_x, tab_coef)
    if s1:
        return phi, theta, phidot, thetadot, 1
    h = 0.5 * dt
    a2, b2, s2 = eom_rhs_core(phi + h * phidot, theta + h * thetadot,
                              phidot + h * a1, thetadot + h * b1,
                              bx, by, bz, mu, inertia, damping, kind, c, tab_x, tab_coef)
    if s2:
        return phi, theta, phidot, thetadot, 1
    a3, b3, s3 = eom_rhs_core(phi + h * (phidot + h * a1), theta + h * (thetadot + h * b1),
                              phidot + h * a2, thetadot + h * b2,
                              bx, by, bz, mu, inertia, damping, kind, c, tab_x, tab_coef)
    if s3:
        return phi, theta, phidot, thetadot, 1
    a4, b4, s4 = eom_rhs_core(phi + dt * (phidot + h * a2), theta + dt * (thetadot + h * b2),
                              phidot + dt * a3, thetadot + dt * b3,
                              bx, by, bz, mu, inertia, damping, kind, c, tab_x, tab_coef)
    if s4:
        return phi, theta, phidot, thetadot, 1
    sixth = dt / 6.0
    nphi = phi + sixth * (phidot + 2.0 * (phidot + h * a1) + 2.0 * (phidot + h * a2)
                          + (phidot + dt * a3))
    ntheta = theta + sixth * (thetadot + 2.0 * (thetadot + h * b1)
                              + 2.0 * (thetadot + h * b2) + (thetadot + dt * b3))
    nphidot = phidot + sixth * (a1 + 2.0 * a2 + 2.0 * a3 + a4)
    nthetadot = thetadot + sixth * (b1 + 2.0 * b2 + 2.0 * b3 + b4)

    if not (math.isfinite(nphi) and math.isfinite(ntheta)
            and math.isfinite(nphidot) and math.isfinite(nthetadot)):
        return phi, theta, phidot, thetadot, 2
    # reflective clamp at the coordinate boundary
    if nphi < 0.0:
        if nphi >= -1.0e-9:
            nphi = -nphi
            nphidot = -nphidot
        else:
            return phi, theta, phidot, thetadot, 2
    elif nphi > math.pi:
        if nphi <= math.pi + 1.0e-9:
            nphi = 2.0 * math.pi - nphi
            nphidot = -nphidot
        else:
            return phi, theta, phidot, thetadot, 2
    return nphi, _wrap_theta(ntheta), nphidot, nthetadot, 0


@njit(cache=True, inline="always")
def spherical_to_cart(phi, theta):
    sp = math.sin(phi)
    return sp * math.cos(theta), sp * math.sin(theta), math.cos(phi)


@njit(cache=True, inline="always")
def rotate_state_core(phi, theta, phidot, thetadot, to_rotated):
    """Exact transform of orientation + rates under R_x(+pi/2).

    Components in the rotated frame: v' = (v_x, -v_z, v_y); back: (v_x, v_z, -v_y).
    """
    sp = math.sin(phi)
    cp = math.cos(phi)
    st = math.sin(theta)
    ct = math.cos(theta)
    dx, dy, dz = sp * ct, sp * st, cp
    # time derivative of the direction
    vx = phidot * cp * ct - thetadot * sp * st
    vy = phidot * cp * st + thetadot * sp * ct
    vz = -phidot * sp
    if to_rotated:
        dx2, dy2, dz2 = dx, -dz, dy
        vx2, vy2, vz2 = vx, -vz, vy
    else:
        dx2, dy2, dz2 = dx, dz, -dy
        vx2, vy2, vz2 = vx, vz, -vy
    s2 = math.sqrt(dx2 * dx2 + dy2 * dy2)
    phi2 = math.atan2(s2, dz2)
    if s2 > 1.0e-14:
        theta2 = math.atan2(dy2, dx2)
        ct2 = dx2 / s2
        st2 = dy2 / s2
        phidot2 = vx2 * dz2 * ct2 + vy2 * dz2 * st2 - vz2 * s2
        thetadot2 = (-vx2 * st2 + vy2 * ct2) / s2
    else:
        # at a pole: point theta along the velocity, all motion is polar
        vnorm = math.sqrt(vx2 * vx2 + vy2 * vy2)
        if vnorm > 1.0e-300:
            theta2 = math.atan2(vy2, vx2)
            ct2 = vx2 / vnorm
            st2 = vy2 / vnorm
            phidot2 = vx2 * dz2 * ct2 + vy2 * dz2 * st2
        else:
            theta2 = 0.0
            phidot2 = 0.0
        thetadot2 = 0.0
    return phi2, _wrap_theta(theta2), phidot2, thetadot2


@njit(cache=True, inline="always")
def _to_working_b(bx, by, bz, frame):
    if frame == 1:
        return bx, -bz, by
    return bx, by, bz


@njit(cache=True, inline="always")
def _lab_direction(phi, theta, frame):
    dx, dy, dz = spherical_to_cart(phi, theta)
    if frame == 1:
        return dx, dz, -dy
    return dx, dy, dz


@njit(cache=True, inline="always")
def _beta_of(dx, dy, dz, bx, by, bz):
    """Angle between a unit direction and B; falls back to the gap-field
    axis (-z) when the field is numerically zero. Returns (beta, fellback)."""
    b2 = bx * bx + by * by + bz * bz
    if b2 < B_FLOOR * B_FLOOR:
        u = -dz
        if u > 1.0:
            u = 1.0
        elif u < -1.0:
            u = -1.0
        return math.acos(u), True
    u = (dx * bx + dy * by + dz * bz) / math.sqrt(b2)
    if u > 1.0:
        u = 1.0
    elif u < -1.0:
        u = -1.0
    return math.acos(u), False


# --------------------------------------------------------------------------
# the nested fast/slow run loop
# --------------------------------------------------------------------------

@njit(cache=True)
def _sample12(fmode, gdata, gorigin, gspacing, gdims,
              tris, currents, tris_all, uniform_b,
              rel_tol, max_depth, px, py, pz, out):
    """B + jacobian at a point from the configured source.

    Returns 0 ok, 1 out of bounds (grid), 2 quadrature tolerance miss
    (estimate still stored)."""
    if fmode == FIELD_GRID:
        if grid_sample(gdata, gorigin, gspacing, gdims, px, py, pz, out):
            return 0
        return 1
    elif fmode == FIELD_DIRECT:
        dist = surface_distance(tris_all, px, py, pz)
        delta = fd_step(dist)
        b, e1, s1 = bs_field(tris, currents, px, py, pz, rel_tol, max_depth)
        jac, e2, s2 = bs_jacobian(tris, currents, px, py, pz, delta,
                                  rel_tol, max_depth)
        out[0] = b[0]
        out[1] = b[1]
        out[2] = b[2]
        for i in range(3):
            for j in range(3):
                out[3 + 3 * i + j] = jac[i, j]
        return 2 if (s1 != QUAD_OK or s2 != QUAD_OK) else 0
    else:
        out[0] = uniform_b[0]
        out[1] = uniform_b[1]
        out[2] = uniform_b[2]
        for c in range(3, 12):
            out[c] = 0.0
        return 0


@njit(cache=True, inline="always")
def force_from_sample(model, suppress, sigma_y, mux, muy, muz, s12, py):
    """Translational force for the configured model from a 12-component
    field sample. `py` feeds the divergence-suppression factor."""
    if model == FORCE_FULL:
        # (mu . grad) B + mu x curl B
        fx = mux * s12[3] + muy * s12[4] + muz * s12[5]
        fy = mux * s12[6] + muy * s12[7] + muz * s12[8]
        fz = mux * s12[9] + muy * s12[10] + muz * s12[11]
        curlx = s12[10] - s12[8]
        curly = s12[5] - s12[9]
        curlz = s12[6] - s12[4]
        fx += muy * curlz - muz * curly
        fy += muz * curlx - mux * curlz
        fz += mux * curly - muy * curlx
        return fx, fy, fz
    elif model == FORCE_DRIFT_AWARE:
        fy = muz * (s12[10] - s12[8])
        fz = muz * s12[11]
        return 0.0, fy, fz
    else:
        g = s12[11]
        if suppress:
            r = py / sigma_y
            g *= math.exp(-r * r)
        return 0.0, 0.0, muz * g


@njit(cache=True)
def run_single_core(phi0, theta0, x0, y0, z0, vx0,
                    fmode, gdata, gorigin, gspacing, gdims,
                    tris, currents, tris_all, uniform_b, rel_tol, max_depth,
                    mu, inertia, damping, kind, c, tab_x, tab_coef,
                    mass, force_model, suppress, sigma_y,
                    dt_fast, substeps, x_enter, x_exit, detector_d, eps_class,
                    max_slow_steps, rec_every, rec_buf):
    """One full trajectory: nested RK4 (moment, fast) / RK2 (carrier, slow).

    Per slow step the position is frozen, the moment advances `substeps`
    fast steps in an automatically chosen working frame, then the carrier
    takes one midpoint step with the end-of-block moment orientation. The
    translational force is gated to x in [x_enter, x_exit]; the run ends
    once x >= x_exit.

    Returns (beta_i, beta_f, classification, exit state..., detector hit,
    max drive ratio, flags, number of recorded rows).
    """
    dt_slow = dt_fast * substeps
    flags = 0
    s12 = np.empty(12)
    s12_mid = np.empty(12)

    phi = phi0
    theta = theta0
    phidot = 0.0
    thetadot = 0.0
    frame = 0
    px, py, pz = x0, y0, z0
    vx, vy, vz = vx0, 0.0, 0.0
    t = 0.0
    max_drive = 0.0
    n_rec = 0

    st = _sample12(fmode, gdata, gorigin, gspacing, gdims, tris, currents,
                   tris_all, uniform_b, rel_tol, max_depth, px, py, pz, s12)
    if st == 1:
        flags |= FLAG_OUT_OF_BOUNDS
        for ccc in range(12):
            s12[ccc] = 0.0
    elif st == 2:
        flags |= FLAG_QUADRATURE
    dx0, dy0, dz0 = _lab_direction(phi, theta, frame)
    beta_i, fell = _beta_of(dx0, dy0, dz0, s12[0], s12[1], s12[2])
    if fell:
        flags |= FLAG_ZERO_FIELD

    slow = 0
    while px < x_exit and (flags & (FLAG_OUT_OF_BOUNDS | FLAG_STEP_REJECTED | FLAG_SINGULAR)) == 0:
        if slow >= max_slow_steps:
            flags |= FLAG_STEP_CAP
            break
        if slow > 0:
            st = _sample12(fmode, gdata, gorigin, gspacing, gdims, tris, currents,
                           tris_all, uniform_b, rel_tol, max_depth, px, py, pz, s12)
            if st == 1:
                flags |= FLAG_OUT_OF_BOUNDS
                break
            elif st == 2:
                flags |= FLAG_QUADRATURE
        bzl = abs(s12[2])
        drive = DRIVE_INF if bzl == 0.0 else abs(s12[0]) / bzl
        if drive > max_drive:
            max_drive = drive

        # --- fast block: moment dynamics at frozen position ---------------
        bwx, bwy, bwz = _to_working_b(s12[0], s12[1], s12[2], frame)
        for k in range(substeps):
            spn = math.sin(phi)
            if spn * spn < FRAME_SWITCH_SIN2:
                phi, theta, phidot, thetadot = rotate_state_core(
                    phi, theta, phidot, thetadot, frame == 0)
                frame = 1 - frame
                bwx, bwy, bwz = _to_working_b(s12[0], s12[1], s12[2], frame)
            phi, theta, phidot, thetadot, stat = rk4_fast_step(
                phi, theta, phidot, thetadot, bwx, bwy, bwz,
                mu, inertia, damping, kind, c, tab_x, tab_coef, dt_fast)
            if stat == 1:
                flags |= FLAG_SINGULAR
                break
            elif stat == 2:
                flags |= FLAG_STEP_REJECTED
                break

        # --- slow step: carrier kinematics with frozen moment -------------
        mdx, mdy, mdz = _lab_direction(phi, theta, frame)
        mux, muy, muz = mu * mdx, mu * mdy, mu * mdz
        gate1 = (px >= x_enter) and (px <= x_exit)
        if gate1:
            f1x, f1y, f1z = force_from_sample(force_model, suppress, sigma_y,
                                              mux, muy, muz, s12, py)
        else:
            f1x, f1y, f1z = 0.0, 0.0, 0.0

        if rec_every > 0 and slow % rec_every == 0 and n_rec < rec_buf.shape[0]:
            bnow, _ = _beta_of(mdx, mdy, mdz, s12[0], s12[1], s12[2])
            rec_buf[n_rec, 0] = t
            rec_buf[n_rec, 1] = px
            rec_buf[n_rec, 2] = py
            rec_buf[n_rec, 3] = pz
            rec_buf[n_rec, 4] = vx
            rec_buf[n_rec, 5] = vy
            rec_buf[n_rec, 6] = vz
            rec_buf[n_rec, 7] = phi if frame == 0 else math.acos(max(-1.0, min(1.0, mdz)))
            rec_buf[n_rec, 8] = theta if frame == 0 else _wrap_theta(math.atan2(mdy, mdx))
            rec_buf[n_rec, 9] = bnow
            rec_buf[n_rec, 10] = f1y
            rec_buf[n_rec, 11] = f1z
            rec_buf[n_rec, 12] = drive
            n_rec += 1

        hx = px + 0.5 * dt_slow * vx
        hy = py + 0.5 * dt_slow * vy
        hz = pz + 0.5 * dt_slow * vz
        hvx = vx + 0.5 * dt_slow * f1x / mass
        hvy = vy + 0.5 * dt_slow * f1y / mass
        hvz = vz + 0.5 * dt_slow * f1z / mass
        gate2 = (hx >= x_enter) and (hx <= x_exit)
        if gate2:
            st2 = _sample12(fmode, gdata, gorigin, gspacing, gdims, tris, currents,
                            tris_all, uniform_b, rel_tol, max_depth, hx, hy, hz, s12_mid)
            if st2 == 1:
                flags |= FLAG_OUT_OF_BOUNDS
                break
            elif st2 == 2:
                flags |= FLAG_QUADRATURE
            f2x, f2y, f2z = force_from_sample(force_model, suppress, sigma_y,
                                              mux, muy, muz, s12_mid, hy)
        else:
            f2x, f2y, f2z = 0.0, 0.0, 0.0
        px += dt_slow * hvx
        py += dt_slow * hvy
        pz += dt_slow * hvz
        vx += dt_slow * f2x / mass
        vy += dt_slow * f2y / mass
        vz += dt_slow * f2z / mass
        t += dt_slow
        slow += 1

    # --- termination: classify, project ------------------------------------
    st = _sample12(fmode, gdata, gorigin, gspacing, gdims, tris, currents,
                   tris_all, uniform_b, rel_tol, max_depth, px, py, pz, s12)
    if st == 1:
        flags |= FLAG_OUT_OF_BOUNDS
        for ccc in range(12):
            s12[ccc] = 0.0
    elif st == 2:
        flags |= FLAG_QUADRATURE
    fdx, fdy, fdz = _lab_direction(phi, theta, frame)
    beta_f, fell = _beta_of(fdx, fdy, fdz, s12[0], s12[1], s12[2])
    if fell:
        flags |= FLAG_ZERO_FIELD

    if beta_f < 0.5 * math.pi - eps_class:
        cls = CLASS_UP
    elif beta_f > 0.5 * math.pi + eps_class:
        cls = CLASS_DOWN
    else:
        cls = CLASS_UNRESOLVED

    if vx > 0.0:
        det_y = py + vy * (detector_d / vx)
        det_z = pz + vz * (detector_d / vx)
    else:
        flags |= FLAG_NON_FORWARD
        det_y = np.nan
        det_z = np.nan

    return (beta_i, beta_f, cls, px, py, pz, vx, vy, vz,
            det_y, det_z, max_drive, flags, n_rec)


@njit(cache=True, parallel=True)
def ensemble_core(ics, fmode, gdata, gorigin, gspacing, gdims,
                  tris, currents, tris_all, uniform_b, rel_tol, max_depth,
                  mu, inertia, damping, kind, c, tab_x, tab_coef,
                  mass, force_model, suppress, sigma_y,
                  dt_fast, substeps, x_enter, x_exit, detector_d, eps_class,
                  max_slow_steps):
    """Independent runs distributed over threads; outputs indexed by run so
    results are identical for any thread count."""
    n = ics.shape[0]
    out = np.empty((n, 13))
    dummy_rec = np.empty((0, 13))
    for i in prange(n):
        (beta_i, beta_f, cls, px, py, pz, vx, vy, vz,
         det_y, det_z, max_drive, flags, _n) = run_single_core(
            ics[i, 0], ics[i, 1], ics[i, 2], ics[i, 3], ics[i, 4], ics[i, 5],
            fmode, gdata, gorigin, gspacing, gdims,
            tris, currents, tris_all, uniform_b, rel_tol, max_depth,
            mu, inertia, damping, kind, c, tab_x, tab_coef,
            mass, force_model, suppress, sigma_y,
            dt_fast, substeps, x_enter, x_exit, detector_d, eps_class,
            max_slow_steps, 0, dummy_rec)
        out[i, 0] = beta_i
        out[i, 1] = beta_f
        out[i, 2] = cls
        out[i, 3] = px
        out[i, 4] = py
        out[i, 5] = pz
        out[i, 6] = vx
        out[i, 7] = vy
        out[i, 8] = vz
        out[i, 9] = det_y
        out[i, 10] = det_z
        out[i, 11] = max_drive
        out[i, 12] = flags
    return out
