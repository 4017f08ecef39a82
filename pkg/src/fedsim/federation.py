"""Round-based federated orchestration and the strategy zoo.

One process plays every client plus the hub.  A strategy decides what the
clients exchange between rounds: nothing (local), parameter averages
(fedavg family), proximal-anchored averages (fedprox), class prototypes
(fedproto), per-class mean outputs (feddistill), or low-uncertainty
attention rollout maps (fedevprompt and the kd ablations).  A MessageLog
records every exchange so sharing contracts stay auditable.
"""

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import distill as ds
from . import evidential as ev
from . import vit
from .config import ExperimentConfig
from .data import FederationDataset, generate_synthetic, load_external, split


class FederationError(RuntimeError):
    """Protocol-order violation inside the orchestrator."""


PAYLOAD_KINDS = ("attention_maps", "parameters", "prototypes", "mean_logits")


@dataclass(frozen=True)
class Message:
    round_index: int
    sender: str
    receiver: str
    payload_kind: str
    payload_size: int


class MessageLog:
    """Append-only record of everything that crossed the wire stand-in."""

    def __init__(self):
        self._messages = []

    def record(self, round_index, sender, receiver, payload_kind, payload_size):
        if payload_kind not in PAYLOAD_KINDS:
            raise FederationError(f"unknown payload kind {payload_kind!r}")
        self._messages.append(Message(
            int(round_index), str(sender), str(receiver), payload_kind, int(payload_size),
        ))

    def payload_kinds(self) -> set:
        return {m.payload_kind for m in self._messages}

    def __len__(self) -> int:
        return len(self._messages)

    def __iter__(self):
        return iter(self._messages)


class SGDW:
    """Plain SGD with decoupled weight decay.

    theta <- theta * (1 - lr * wd) - lr * grad; the decay multiplies the
    parameter directly instead of entering the gradient.
    """

    def __init__(self, params, lr: float, weight_decay: float = 0.0):
        if lr <= 0:
            raise FederationError(f"learning rate must be positive, got {lr}")
        if weight_decay < 0:
            raise FederationError(f"weight decay must be non-negative, got {weight_decay}")
        self.params = list(params)
        self.lr = float(lr)
        self.weight_decay = float(weight_decay)

    def step(self):
        decay = 1.0 - self.lr * self.weight_decay
        for p in self.params:
            if p.grad is None:
                continue
            if self.weight_decay:
                p.data *= decay
            p.data -= self.lr * p.grad

    def zero_grad(self):
        for p in self.params:
            p.grad = None


@dataclass(frozen=True)
class StrategyPlan:
    name: str
    share: tuple = ()
    kd: str = ""
    prox: bool = False
    proto: bool = False
    distill: bool = False
    personalize: bool = False
    g_groups: bool = False

    @property
    def local_only(self) -> bool:
        return not (self.share or self.kd or self.proto or self.distill)


def strategy_plan(name: str, share_head: bool = True) -> StrategyPlan:
    """Resolve a strategy name; share_head applies to the fedavg family."""
    avg_share = ("b", "t", "head") if share_head else ("b", "t")
    table = {
        "local_bt": StrategyPlan(name),
        "local_g": StrategyPlan(name, g_groups=True),
        "fedavg": StrategyPlan(name, share=avg_share),
        "fedavg_pers": StrategyPlan(name, share=avg_share, personalize=True),
        "fedprox": StrategyPlan(name, share=avg_share, prox=True),
        "fedproto": StrategyPlan(name, proto=True),
        "feddistill": StrategyPlan(name, distill=True),
        "fedevprompt": StrategyPlan(name, kd="uncertainty"),
        "kd_uncertainty": StrategyPlan(name, kd="uncertainty"),
        "kd_random": StrategyPlan(name, kd="random"),
        "fedavg_b": StrategyPlan(name, share=("b",)),
        "fedavg_bt": StrategyPlan(name, share=("b", "t")),
        "fedavg_bt_kd": StrategyPlan(name, share=("b", "t"), kd="uncertainty"),
        "fedavg_g": StrategyPlan(name, share=("b", "t"), g_groups=True),
        "fedavg_g_kd": StrategyPlan(name, share=("b", "t"), kd="uncertainty", g_groups=True),
    }
    if name not in table:
        raise FederationError(f"unknown strategy {name!r}")
    return table[name]


class ClientState:
    """One client's model, optimizers, data, and token caches."""

    def __init__(self, client_id, train, test, backbone, prompt_seed, head_seed,
                 mu1, mu2, weight_decay, g_groups, num_classes):
        self.client_id = int(client_id)
        self.train = train
        self.test = test
        self.backbone = backbone
        cfg = backbone.config
        self.prompts = vit.PromptSet(cfg, prompt_seed)
        self.head = vit.EvidenceHead(cfg, head_seed)
        counts = np.bincount(train.labels, minlength=num_classes)
        self.prior = ev.weighted_prior(counts)
        b_group, t_group = vit.trainable_params(self.prompts, self.head)
        # the g variants collapse both partitions to the slow rate
        lr_t = mu1 if g_groups else mu2
        self.opt_b = SGDW(b_group, mu1, weight_decay)
        self.opt_t = SGDW(t_group, lr_t, weight_decay)
        self._train_tokens = None
        self._test_tokens = None

    def train_tokens(self) -> np.ndarray:
        if self._train_tokens is None:
            self._train_tokens = vit.embed_tokens(self.train.images, self.backbone)
        return self._train_tokens

    def test_tokens(self) -> np.ndarray:
        if self._test_tokens is None:
            self._test_tokens = vit.embed_tokens(self.test.images, self.backbone)
        return self._test_tokens

    def shared_params(self, share: tuple) -> list:
        out = []
        if "b" in share:
            out.extend(self.prompts.b_parameters())
        if "t" in share:
            out.extend(self.prompts.t_parameters())
        if "head" in share:
            out.extend(self.head.parameters())
        return out

    def all_trainable(self) -> list:
        return self.prompts.parameters() + self.head.parameters()


def _one_hot(labels, num_classes) -> np.ndarray:
    out = np.zeros((len(labels), num_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def balanced_accuracy(predictions, labels) -> float:
    """Mean per-class recall over the classes present in ``labels``."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if labels.size == 0:
        raise FederationError("cannot score an empty test set")
    recalls = []
    for k in np.unique(labels):
        mask = labels == k
        recalls.append(float((predictions[mask] == k).mean()))
    return float(np.mean(recalls))


def evaluate(client: ClientState, batch_size: int):
    """(balanced accuracy, mean vacuity) on the client's test split."""
    tokens = client.test_tokens()
    labels = client.test.labels
    k = client.prior.num_classes
    preds = np.empty(len(labels), dtype=np.int64)
    vac = np.empty(len(labels))
    with ad.no_grad():
        for start in range(0, len(labels), batch_size):
            sl = slice(start, start + batch_size)
            evd, _ = vit.forward(None, client.backbone, client.prompts, client.head,
                                 tokens=tokens[sl])
            alpha = evd.data + client.prior.W
            preds[sl] = np.argmax(alpha, axis=1)
            vac[sl] = np.minimum(1.0, k / alpha.sum(axis=1))
    return balanced_accuracy(preds, labels), float(vac.mean())


def _train_one_round(client, vcfg, plan, *, round_index, epochs, batch_size,
                     lambda_kd, kd_consts, prox_mu, prox_anchor, proto_beta,
                     protos, distill_gamma, distill_targets, shuffle_rng):
    """Local epochs for one client; returns round-mean (loss_eps, loss_kd)."""
    tokens = client.train_tokens()
    labels = client.train.labels
    n = len(labels)
    k = client.prior.num_classes
    use_kd = kd_consts is not None and kd_consts.has_foreign
    sum_eps = 0.0
    sum_kd = 0.0
    for epoch in range(epochs):
        t_cum = (round_index - 1) * epochs + epoch
        order = shuffle_rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            y = _one_hot(labels[idx], k)
            feats, attns = vit.forward_features(None, client.backbone, client.prompts,
                                                tokens=tokens[idx])
            evd = client.head(feats)
            alpha = ad.add(evd, ad.Tensor(client.prior.W))
            l_eps = ev.evidential_loss(y, alpha, client.prior.W, t_cum)
            loss = l_eps
            if use_kd:
                rollout = vit.attention_rollout(attns, vcfg)
                l_kd = ds.kd_loss_batch(rollout, labels[idx], kd_consts)
                loss = ds.combined_loss(l_eps, l_kd, lambda_kd)
                sum_kd += float(l_kd.data) * len(idx)
            if plan.prox and prox_anchor is not None:
                loss = ad.add(loss, _prox_term(client, plan.share, prox_anchor, prox_mu))
            if plan.proto and protos is not None:
                loss = ad.add(loss, _proto_term(feats, labels[idx], protos, proto_beta))
            if plan.distill and distill_targets is not None:
                loss = ad.add(loss, _distill_term(evd, labels[idx], distill_targets,
                                                  distill_gamma))
            ad.backward(loss)
            client.opt_b.step()
            client.opt_t.step()
            client.opt_b.zero_grad()
            client.opt_t.zero_grad()
            sum_eps += float(l_eps.data) * len(idx)
    total = n * epochs
    return sum_eps / total, sum_kd / total


def _prox_term(client, share, anchor, mu):
    """(mu/2) * squared distance of the shared groups from the round anchor."""
    acc = None
    for p, ref in zip(client.shared_params(share), anchor):
        d = ad.sub(p, ad.Tensor(ref))
        s = ad.sum_(ad.mul(d, d))
        acc = s if acc is None else ad.add(acc, s)
    return ad.mul(acc, 0.5 * mu)


def _proto_term(feats, labels, protos, beta):
    """beta * mean_b ||f_b - proto[y_b]||^2, skipping classes without one."""
    targets, have = protos
    mask = have[labels].astype(np.float64)
    d = ad.sub(feats, ad.Tensor(targets[labels]))
    per_sample = ad.sum_(ad.mul(d, d), axis=1)
    return ad.mul(ad.mean(ad.mul(per_sample, ad.Tensor(mask))), beta)


def _distill_term(evidence, labels, targets, gamma):
    """gamma * MSE between batch per-class mean outputs and foreign means."""
    target_means, have = targets
    present = [int(c) for c in np.unique(labels) if have[int(c)]]
    if not present:
        return ad.Tensor(0.0)
    sel = np.zeros((len(present), len(labels)))
    for row, c in enumerate(present):
        mask = labels == c
        sel[row, mask] = 1.0 / mask.sum()
    batch_means = ad.matmul(ad.Tensor(sel), evidence)
    return ad.mul(ad.mse(batch_means, ad.Tensor(target_means[present])), gamma)


def _aggregate(clients, share, weights):
    """Weighted average of the shared groups, written back to every client.

    Computed as ref + sum_c w_c * (theta_c - ref) so that aggregating
    identical parameters returns them bit-exactly.
    """
    if not clients:
        return
    ref_params = clients[0].shared_params(share)
    group_lists = [c.shared_params(share) for c in clients]
    for i, ref in enumerate(ref_params):
        acc = np.zeros_like(ref.data)
        for params, w in zip(group_lists, weights):
            delta = params[i].data - ref.data
            if delta.any():
                acc += w * delta
        new = ref.data if not acc.any() else ref.data + acc
        for params in group_lists:
            params[i].data = new.copy()
    return


def _param_count(client, share) -> int:
    return int(sum(p.data.size for p in client.shared_params(share)))


def _publish_maps(client, vcfg, buffer, batch_size, mode, select_rng, log, round_index):
    """Two-pass publication: rank every sample's vacuity, then recompute
    rollout maps only for the selected few."""
    tokens = client.train_tokens()
    labels = client.train.labels
    n = len(labels)
    k = client.prior.num_classes
    vac = np.empty(n)
    with ad.no_grad():
        for start in range(0, n, batch_size):
            sl = slice(start, start + batch_size)
            evd, _ = vit.forward(None, client.backbone, client.prompts, client.head,
                                 tokens=tokens[sl])
            vac[sl] = np.minimum(1.0, k / (evd.data + client.prior.W).sum(axis=1))
    scored = [(int(labels[i]), float(vac[i]), i) for i in range(n)]
    if mode == "uncertainty":
        selected = ds.select_for_sharing(scored, buffer.capacity_per_class)
    else:
        selected = ds.random_selection_baseline(scored, buffer.capacity_per_class, select_rng)
    ids = [i for class_id in sorted(selected) for i in selected[class_id]]
    maps = []
    with ad.no_grad():
        for start in range(0, len(ids), batch_size):
            chunk = ids[start:start + batch_size]
            _, attns = vit.forward_features(None, client.backbone, client.prompts,
                                            tokens=tokens[chunk])
            grids = vit.attention_rollout(attns, vcfg).data
            for grid, i in zip(grids, chunk):
                maps.append(ds.RolloutMap(grid, client.client_id, int(labels[i]),
                                          float(vac[i]), int(i)))
    buffer.publish(client.client_id, maps)
    size = sum(m.grid.size for m in maps)
    log.record(round_index, f"client{client.client_id}", "hub", "attention_maps", size)


def _class_output_means(client, batch_size, what):
    """Per-class means of features or evidence over the train split."""
    tokens = client.train_tokens()
    labels = client.train.labels
    k = client.prior.num_classes
    dim = client.backbone.config.embed_dim if what == "features" else k
    sums = np.zeros((k, dim))
    counts = np.zeros(k)
    with ad.no_grad():
        for start in range(0, len(labels), batch_size):
            sl = slice(start, start + batch_size)
            if what == "features":
                out, _ = vit.forward_features(None, client.backbone, client.prompts,
                                              tokens=tokens[sl])
                vals = out.data
            else:
                evd, _ = vit.forward(None, client.backbone, client.prompts, client.head,
                                     tokens=tokens[sl])
                vals = evd.data
            for c in np.unique(labels[sl]):
                mask = labels[sl] == c
                sums[c] += vals[mask].sum(axis=0)
                counts[c] += mask.sum()
    means = np.zeros_like(sums)
    have = counts > 0
    means[have] = sums[have] / counts[have, None]
    return means, counts


def _global_prototypes(per_client, num_classes, dim):
    """Sample-weighted average of client prototypes, per class."""
    total = np.zeros((num_classes, dim))
    weight = np.zeros(num_classes)
    for means, counts in per_client:
        total += means * counts[:, None]
        weight += counts
    have = weight > 0
    out = np.zeros((num_classes, dim))
    out[have] = total[have] / weight[have, None]
    return out, have


def _leave_one_out_targets(per_client, num_classes, dim):
    """For each client: sample-weighted mean of the *other* clients' stats."""
    total = np.zeros((num_classes, dim))
    weight = np.zeros(num_classes)
    for means, counts in per_client:
        total += means * counts[:, None]
        weight += counts
    targets = []
    for means, counts in per_client:
        rest = total - means * counts[:, None]
        rest_w = weight - counts
        have = rest_w > 0
        out = np.zeros((num_classes, dim))
        out[have] = rest[have] / rest_w[have, None]
        targets.append((out, have))
    return targets


@dataclass(frozen=True)
class RoundRecord:
    strategy: str
    seed: int
    round_index: int
    client_id: int
    balanced_accuracy: float
    mean_vacuity: float
    loss_eps: float
    loss_kd: float


@dataclass
class ExperimentResult:
    strategy: str
    seed: int
    records: list
    message_log: MessageLog
    buffer: object
    clients: list

    def final_accuracies(self) -> np.ndarray:
        last = max(r.round_index for r in self.records)
        rows = sorted((r for r in self.records if r.round_index == last),
                      key=lambda r: r.client_id)
        return np.array([r.balanced_accuracy for r in rows])


def build_dataset(cfg: ExperimentConfig, seed: int):
    """(train, test) federation for this run; synthetic data derives its
    seed from the run seed so every strategy sees the same federation."""
    vcfg = cfg.vit_config()
    ss = np.random.SeedSequence(seed)
    data_ss, split_ss = ss.spawn(4)[:2]
    if cfg.source == "synthetic":
        full = generate_synthetic(cfg.skew_spec(), int(data_ss.generate_state(1)[0]),
                                  image_size=vcfg.image_size, channels=vcfg.channels)
    else:
        full = load_external(cfg.data_path, vcfg.image_size, vcfg.channels)
    return split(full, 0.75, int(split_ss.generate_state(1)[0]))


def run_experiment(cfg: ExperimentConfig, seed: int, dataset=None,
                   dump_dir=None) -> ExperimentResult:
    """Execute one (strategy, seed) cell end to end."""
    cfg.validate()
    plan = strategy_plan(cfg.strategy, cfg.fedavg_share_head)
    vcfg = cfg.vit_config()

    if dataset is None:
        train_ds, test_ds = build_dataset(cfg, seed)
    else:
        train_ds, test_ds = dataset
    num_clients = train_ds.num_clients

    if cfg.backbone_weights:
        backbone = vit.load_backbone(cfg.backbone_weights, vcfg)
    else:
        backbone = vit.FrozenBackbone.from_seed(vcfg, cfg.backbone_seed)

    ss = np.random.SeedSequence(seed)
    _, _, model_ss, train_ss, select_ss = ss.spawn(5)
    model_seqs = model_ss.spawn(num_clients)
    shuffle_rngs = [np.random.default_rng(s) for s in train_ss.spawn(num_clients)]
    select_rngs = [np.random.default_rng(s) for s in select_ss.spawn(num_clients)]

    clients = []
    for c in range(num_clients):
        pseed, hseed = (int(v) for v in model_seqs[c].generate_state(2))
        clients.append(ClientState(
            c, train_ds.clients[c], test_ds.clients[c], backbone,
            prompt_seed=pseed, head_seed=hseed,
            mu1=cfg.mu1, mu2=cfg.mu2, weight_decay=cfg.weight_decay,
            g_groups=plan.g_groups, num_classes=cfg.num_classes,
        ))

    sizes = np.array([len(c.train) for c in clients], dtype=np.float64)
    weights = sizes / sizes.sum()
    log = MessageLog()
    buffer = None
    if plan.kd:
        buffer = ds.AttentionBuffer(num_clients, cfg.num_classes, cfg.buffer_capacity)

    def record_parameter_sync(round_index):
        for c in clients:
            size = _param_count(c, plan.share)
            log.record(round_index, f"client{c.client_id}", "hub", "parameters", size)
            log.record(round_index, "hub", f"client{c.client_id}", "parameters", size)

    # the fedavg family starts every client from the same global model
    if plan.share:
        _aggregate(clients, plan.share, weights)
        record_parameter_sync(0)

    threads = max(1, int(os.environ.get("FEDSIM_THREADS", "1")))
    protos = None
    distill_targets = None
    records = []

    def train_client(c, round_index):
        client = clients[c]
        kd_consts = None
        if buffer is not None:
            kd_consts = ds.kd_constants(buffer, c, (vcfg.image_size, vcfg.image_size))
        anchor = None
        if plan.prox:
            anchor = [p.data.copy() for p in client.shared_params(plan.share)]
        return _train_one_round(
            client, vcfg, plan,
            round_index=round_index,
            epochs=cfg.epochs_per_round,
            batch_size=cfg.batch_size,
            lambda_kd=cfg.lambda_kd,
            kd_consts=kd_consts,
            prox_mu=cfg.prox_mu,
            prox_anchor=anchor,
            proto_beta=cfg.proto_beta,
            protos=protos,
            distill_gamma=cfg.distill_gamma,
            distill_targets=distill_targets[c] if distill_targets else None,
            shuffle_rng=shuffle_rngs[c],
        )

    def run_training_phase(round_index):
        if threads > 1 and num_clients > 1:
            with ThreadPoolExecutor(max_workers=min(threads, num_clients)) as pool:
                return list(pool.map(lambda c: train_client(c, round_index),
                                     range(num_clients)))
        return [train_client(c, round_index) for c in range(num_clients)]

    total_rounds = cfg.num_rounds + (1 if plan.personalize else 0)
    for r in range(1, total_rounds + 1):
        fine_tuning = r > cfg.num_rounds
        if buffer is not None and buffer.version != r - 1:
            raise FederationError(
                f"round {r} started at buffer version {buffer.version}"
            )
        losses = run_training_phase(r)

        if not fine_tuning:
            if buffer is not None:
                buffer.begin_publish(r)
                for client in clients:
                    _publish_maps(client, vcfg, buffer, cfg.batch_size, plan.kd,
                                  select_rngs[client.client_id], log, r)
                buffer.commit(r)
                if dump_dir is not None:
                    ds.dump_buffer(buffer, dump_dir, r)
            if plan.share:
                _aggregate(clients, plan.share, weights)
                record_parameter_sync(r)
            if plan.proto:
                stats = [_class_output_means(c, cfg.batch_size, "features")
                         for c in clients]
                protos = _global_prototypes(stats, cfg.num_classes, vcfg.embed_dim)
                for c in clients:
                    log.record(r, f"client{c.client_id}", "hub", "prototypes",
                               cfg.num_classes * vcfg.embed_dim)
                    log.record(r, "hub", f"client{c.client_id}", "prototypes",
                               cfg.num_classes * vcfg.embed_dim)
            if plan.distill:
                stats = [_class_output_means(c, cfg.batch_size, "evidence")
                         for c in clients]
                distill_targets = _leave_one_out_targets(stats, cfg.num_classes,
                                                         cfg.num_classes)
                for c in clients:
                    log.record(r, f"client{c.client_id}", "hub", "mean_logits",
                               cfg.num_classes * cfg.num_classes)
                    log.record(r, "hub", f"client{c.client_id}", "mean_logits",
                               cfg.num_classes * cfg.num_classes)

        for client, (l_eps, l_kd) in zip(clients, losses):
            acc, mean_vac = evaluate(client, cfg.batch_size)
            records.append(RoundRecord(cfg.strategy, seed, r, client.client_id,
                                       acc, mean_vac, l_eps, l_kd))

    return ExperimentResult(cfg.strategy, seed, records, log, buffer, clients)


# ---------------------------------------------------------------------------
# results CSV
# ---------------------------------------------------------------------------

CSV_HEADER = "strategy,seed,round,client,balanced_accuracy,mean_vacuity,loss_eps,loss_kd"


def results_csv(records) -> str:
    """CSV body: one row per (client, round) plus a final avg ± std row."""
    lines = [CSV_HEADER]
    for r in records:
        lines.append(
            f"{r.strategy},{r.seed},{r.round_index},{r.client_id},"
            f"{r.balanced_accuracy:.10g},{r.mean_vacuity:.10g},"
            f"{r.loss_eps:.10g},{r.loss_kd:.10g}"
        )
    last = max(r.round_index for r in records)
    final = [r for r in records if r.round_index == last]

    def stat(values):
        arr = np.array(values)
        return f"{arr.mean():.4f} ± {arr.std():.4f}"

    lines.append(
        f"{final[0].strategy},{final[0].seed},{last},avg,"
        f"{stat([r.balanced_accuracy for r in final])},"
        f"{stat([r.mean_vacuity for r in final])},"
        f"{stat([r.loss_eps for r in final])},"
        f"{stat([r.loss_kd for r in final])}"
    )
    return "\n".join(lines) + "\n"
