import numpy as np

from spiderfl.data import synth_dataset
from spiderfl.search_space import NUM_EDGES, ArchMask, SupernetSpec, build_supernet, mask_weights
from spiderfl.trainer import ClientData, ClientState, client_rngs

TINY = SupernetSpec(num_cells=1, init_channels=2, num_classes=3, input_shape=(3, 5, 5))


def make_client(cid=0, seed=0, mask=None, spec=TINY, n=(12, 6, 6), w0=None):
    ds = synth_dataset(spec.num_classes, sum(n), spec.input_shape[1], seed=seed + 100 * cid, noise=0.2)
    order = np.random.default_rng(seed).permutation(len(ds))
    cut = np.cumsum(n)
    train, val, test = order[: cut[0]], order[cut[0] : cut[1]], order[cut[1] : cut[2]]
    mask = mask or ArchMask.full()
    w0 = w0 if w0 is not None else build_supernet(spec, seed)
    rng, search_rng = client_rngs(seed, cid)
    data = ClientData(ds.subset(train), ds.subset(val), ds.subset(test))
    return ClientState(cid, data, mask, mask_weights(w0, mask).copy(), list(range(NUM_EDGES)), rng, search_rng, spec)
