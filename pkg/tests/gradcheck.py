"""Central finite differences over every parameter of a JSCC pair."""
import numpy as np

from fpcc.jscc import draw_channel_noise, end_to_end

STEP = 1e-6
# below this magnitude FD roundoff (~1e-10 absolute) dominates the relative error
FLOOR = 1e-5


def jscc_gradcheck(enc, dec, x, snr_db, seed=0):
    """Return (worst relative error, number of parameters checked)."""
    noise = draw_channel_noise((x.shape[0], enc.width), snr_db, np.random.default_rng(seed))
    grads = {}
    end_to_end(enc, dec, x, snr_db, noise, grads)
    worst = 0.0
    count = 0
    for name, p in enc.store.items():
        analytic = grads.get(name, np.zeros_like(p))
        flat = p.reshape(-1)
        ga = analytic.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + STEP
            up, _ = end_to_end(enc, dec, x, snr_db, noise)
            flat[i] = old - STEP
            dn, _ = end_to_end(enc, dec, x, snr_db, noise)
            flat[i] = old
            fd = (up - dn) / (2 * STEP)
            err = abs(ga[i] - fd) / max(abs(ga[i]), abs(fd), FLOOR)
            worst = max(worst, err)
            count += 1
    return worst, count
