"""Two-stage optimisation: supervised-initialised pretraining, then contrastive finetuning."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import losses as L
from .analysis import psnr, ssim
from .checkpoint import load_checkpoint, save_checkpoint
from .config import TrainConfig
from .data import SynthDataset
from .errors import ConfigError, DataIOError, FormatError, NumericError
from .networks import Networks, image_to_tensor, pool_taps, tensor_to_image
from .sampler import sample_layer_patches, sample_location_pairs

log = logging.getLogger(__name__)

LOG_FIELDS = ("iter", "stage", "l_mse", "l_sparse", "l_adv", "l_loc", "l_layer", "l_asy", "eta", "l_sup", "l_disc")
CURVE_FIELDS = ("epoch", "iter", "intra_B", "intra_R", "inter_BR")


@dataclass
class DistanceCurve:
    records: list[dict] = field(default_factory=list)

    def append(self, record: dict) -> None:
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def write_csv(self, path) -> None:
        write_csv(path, CURVE_FIELDS, self.records)


def write_csv(path, fields, rows) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(fields), extrasaction="ignore")
            w.writeheader()
            for row in rows:
                w.writerow(row)
    except OSError as exc:
        raise DataIOError(f"cannot write {path}: {exc}") from exc


def resolve_device(name: str) -> torch.device:
    """Validate a device string; CUDA must actually be present."""
    try:
        device = torch.device(name)
    except RuntimeError as exc:
        raise ConfigError(f"device: unknown device {name!r}") from exc
    if device.type == "cuda" and not torch.cuda.is_available():
        raise ConfigError("device: CUDA requested but not available")
    return device


def _seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts]).generate_state(1)[0])


def _to_batch(arr) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(np.asarray(arr).transpose(0, 3, 1, 2))).float()


def _numpy_layers(x: torch.Tensor) -> list[np.ndarray]:
    return [a.transpose(1, 2, 0) for a in x.detach().cpu().double().numpy()]


def pairwise_mean_distance(a: np.ndarray, b: np.ndarray | None = None) -> float:
    """Mean Euclidean distance over distinct pairs within ``a`` or across ``a`` and ``b``."""
    a = np.asarray(a, dtype=np.float64)
    if b is None:
        d = np.sqrt(np.maximum(np.sum((a[:, None] - a[None]) ** 2, axis=-1), 0))
        iu = np.triu_indices(len(a), 1)
        return float(d[iu].mean()) if len(iu[0]) else 0.0
    b = np.asarray(b, dtype=np.float64)
    return float(np.sqrt(np.maximum(np.sum((a[:, None] - b[None]) ** 2, axis=-1), 0)).mean())


class Trainer:
    """Owns the networks, optimisers, counters, and logs of one run."""

    def __init__(self, config: TrainConfig, dataset: SynthDataset | None = None, device: str = "cpu"):
        self.config = config
        self.device = resolve_device(device)
        torch.manual_seed(config.seed)
        self.nets = Networks(config.network, config.encoder_choice)
        for module in self.nets.groups().values():
            module.to(self.device)
        self.dataset = dataset
        self.iteration = 0
        self.stage_iters = {"pretrain": 0, "finetune": 0}
        self.loss_log: list[dict] = []
        self.curve = DistanceCurve()
        self._build_optimizers()

    # -- setup -------------------------------------------------------------

    def _build_optimizers(self):
        c, n = self.config, self.nets
        g_params = list(n.g_b.parameters()) + list(n.g_r.parameters()) + list(n.loc.proj.parameters())
        d_modules = [n.disc, n.layer.proj]
        if "layer_encoder" in n.groups():
            d_modules.append(n.layer.encoders["B"])
        d_params = [p for m in d_modules for p in m.parameters()]
        self.opt_g = torch.optim.Adam(g_params, lr=c.lr, betas=c.betas)
        self.opt_d = torch.optim.Adam(d_params, lr=c.lr, betas=c.betas)
        self._g_params, self._d_params = g_params, d_params

    def _zero_all(self):
        for m in (self.nets.g_b, self.nets.g_r, self.nets.disc, self.nets.layer, self.nets.loc):
            m.zero_grad(set_to_none=True)

    def _require_data(self, paired: bool):
        if self.dataset is None or len(self.dataset) == 0:
            raise ConfigError("training needs a non-empty dataset")
        if paired and not self.dataset.paired:
            raise ConfigError("pretraining needs paired clean/rain ground truth")
        if not self.dataset.paired:
            raise ConfigError("the adversarial term needs clean images for the discriminator")

    # -- checkpoints -------------------------------------------------------

    def state(self) -> dict:
        return {"groups": self.nets.groups(),
                "meta": {"iteration": self.iteration, "stage_iters": dict(self.stage_iters),
                         "config": self.config.to_dict()}}

    def save(self, path) -> None:
        save_checkpoint(self.state(), path)

    def load_state(self, ckpt: dict) -> None:
        groups = self.nets.groups()
        missing = set(groups) - set(ckpt["groups"])
        if missing:
            raise FormatError(f"checkpoint lacks parameter groups {sorted(missing)}")
        for name, module in groups.items():
            saved = ckpt["groups"][name]
            if hasattr(saved, "state_dict"):
                saved = saved.state_dict()
            try:
                module.load_state_dict(saved)
            except RuntimeError as exc:
                raise FormatError(f"checkpoint group {name!r} does not fit the network: {exc}") from exc
        meta = ckpt.get("meta", {})
        self.iteration = int(meta.get("iteration", 0))
        self.stage_iters.update(meta.get("stage_iters", {}))

    @classmethod
    def from_checkpoint(cls, path, dataset=None, config: TrainConfig | None = None,
                        device: str = "cpu") -> "Trainer":
        ckpt = load_checkpoint(path)
        if config is None:
            try:
                config = TrainConfig.from_dict(ckpt["meta"]["config"])
            except (KeyError, TypeError) as exc:
                raise FormatError(f"{path}: checkpoint carries no training config") from exc
        trainer = cls(config, dataset, device)
        trainer.load_state(ckpt)
        return trainer

    # -- embeddings --------------------------------------------------------

    def _layer_embeddings(self, B_hat, R_hat, samples, with_grad: bool):
        """Online queries (and cluster embeddings) plus momentum keys for each image."""
        n, size = self.nets, self.config.sampler.patch_size
        tb, sb = n.layer.taps("B", B_hat)
        tr, sr = n.layer.taps("R", R_hat)
        with torch.no_grad():
            kb, _ = n.key.taps("B", B_hat.detach())
            kr, _ = n.key.taps("R", R_hat.detach())
        out = []
        for b, smp in enumerate(samples):
            def emb(embedder, taps, strides, stack):
                refs = stack if isinstance(stack, list) else stack.refs
                return embedder.embed_taps([t[b:b + 1] for t in taps], strides,
                                           [r.top for r in refs], [r.left for r in refs], size)
            rec = {
                "qB": emb(n.layer, tb, sb, [smp.anchor_B]),
                "qR": emb(n.layer, tr, sr, [smp.anchor_R]),
                "fB": emb(n.layer, tb, sb, smp.pos_B),
                "fR": emb(n.layer, tr, sr, smp.pos_R),
            }
            with torch.no_grad():
                rec["kposB"] = emb(n.key, kb, sb, smp.pos_B)
                rec["kposR"] = emb(n.key, kr, sr, smp.pos_R)
                rec["knegR"] = emb(n.key, kr, sr, smp.neg_R)
                rec["knegB"] = emb(n.key, kb, sb, smp.neg_B)
            out.append(rec)
        return out

    def _layer_losses(self, B_hat, R_hat, samples, eta):
        c = self.config
        embs = self._layer_embeddings(B_hat, R_hat, samples, True)
        layer = torch.stack([L.layer_contrastive(e["qB"], e["kposB"], e["qR"], e["kposR"], e["knegB"], e["knegR"],
                                                 c.contrastive) for e in embs]).mean()
        asy = torch.stack([L.asymmetric_contrastive(e["fR"], e["fB"], c.contrastive, eta) for e in embs]).mean()
        return layer, asy

    def _location_loss(self, O, taps_O, B_hat, pairs_per_image):
        n, c = self.nets, self.config
        size = c.sampler.patch_size
        taps_B = n.g_b.taps(B_hat)
        strides = n.g_b.tap_strides
        terms = []
        for b, pairs in enumerate(pairs_per_image):
            to = [t[b:b + 1] for t in taps_O]
            tb = [t[b:b + 1] for t in taps_B]
            tops = [p.pos_O.top for p in pairs]
            lefts = [p.pos_O.left for p in pairs]
            v_o = n.loc.embed_taps(to, strides, tops, lefts, size)
            v_b = n.loc.embed_taps(tb, strides, tops, lefts, size)
            neg_refs = [r for p in pairs for r in p.negatives.refs]
            v_neg = n.loc.embed_taps(to, strides, [r.top for r in neg_refs], [r.left for r in neg_refs], size)
            v_neg = v_neg.reshape(len(pairs), -1, v_neg.shape[-1])
            terms.append(L.location_contrastive(v_o, v_b, v_neg, c.contrastive))
        return torch.stack(terms).mean()

    # -- one iteration -----------------------------------------------------

    def _sample(self, O, B_hat, R_hat, it: int):
        c = self.config
        Os, Bs, Rs = _numpy_layers(O), _numpy_layers(B_hat), _numpy_layers(R_hat)
        layer_samples, loc_pairs = [], []
        for b in range(len(Os)):
            layer_samples.append(sample_layer_patches(Bs[b], Rs[b], c.sampler, _seed(c.seed, it, b, 1)))
            loc_pairs.append(sample_location_pairs(Os[b], Bs[b], c.sampler, _seed(c.seed, it, b, 2)))
        img_patches = np.concatenate([s.pos_B.patches for s in layer_samples])
        rain_patches = np.concatenate([s.pos_R.patches for s in layer_samples])
        eta = L.eta_from_entropy(np.clip(img_patches, 0, 1), np.clip(rain_patches, 0, 1))
        return layer_samples, loc_pairs, eta

    def _check_finite(self, params, what: str):
        for p in params:
            if p.grad is not None and not torch.isfinite(p.grad).all():
                raise NumericError(f"non-finite gradient during the {what} update")

    def step(self, batch: dict, stage: str) -> dict:
        """One generator update followed by one discriminator update."""
        c, n = self.config, self.nets
        w = c.loss_weights
        contrastive = stage == "finetune"
        O = _to_batch(batch["rainy"]).to(self.device)
        real = _to_batch(batch["real"]).to(self.device)
        it = self.iteration + 1

        # generator step
        self._zero_all()
        B_hat, taps_O = n.g_b(O, return_taps=True)
        R_hat = n.g_r(O)
        comps = {
            "l_mse": L.self_consistency(O, B_hat, R_hat),
            "l_sparse": L.rain_sparsity(R_hat),
        }
        _, comps["l_adv"] = L.adversarial_losses_from_logits(None, n.disc(B_hat))
        eta = 0
        if contrastive:
            layer_samples, loc_pairs, eta = self._sample(O, B_hat, R_hat, it)
            comps["l_loc"] = (self._location_loss(O, taps_O, B_hat, loc_pairs) if w.w_loc
                              else torch.zeros(()))
            if w.w_layer or w.w_asy:
                comps["l_layer"], comps["l_asy"] = self._layer_losses(B_hat, R_hat, layer_samples, eta)
                if not w.w_layer:
                    comps["l_layer"] = torch.zeros(())
                if not w.w_asy:
                    comps["l_asy"] = torch.zeros(())
            else:
                comps["l_layer"] = comps["l_asy"] = torch.zeros(())
        total = L.overall_loss(comps, w)
        l_sup = torch.zeros(())
        if stage == "pretrain":
            clean, rain = _to_batch(batch["clean"]).to(self.device), _to_batch(batch["rain"]).to(self.device)
            l_sup = torch.mean((B_hat - clean) ** 2) + torch.mean((R_hat - rain) ** 2)
            total = total + c.w_supervised * l_sup
        if not torch.isfinite(total):
            raise NumericError(f"non-finite generator loss at iteration {it}")
        total.backward()
        self._check_finite(self._g_params, "generator")
        self.opt_g.step()
        if contrastive:
            n.update_key(c.momentum)

        # discriminator step
        self._zero_all()
        B_fake = B_hat.detach()
        loss_d, _ = L.adversarial_losses_from_logits(n.disc(real), n.disc(B_fake))
        d_total = w.w_adv * loss_d
        if contrastive and (w.w_layer or w.w_asy):
            layer_d, asy_d = self._layer_losses(B_fake, R_hat.detach(), layer_samples, eta)
            d_total = d_total + w.w_layer * layer_d + w.w_asy * asy_d
        if not torch.isfinite(d_total):
            raise NumericError(f"non-finite discriminator loss at iteration {it}")
        if d_total.requires_grad:
            d_total.backward()
            self._check_finite(self._d_params, "discriminator")
            self.opt_d.step()

        self.iteration = it
        self.stage_iters[stage] += 1
        record = {"iter": it, "stage": stage, "eta": eta, "l_sup": float(l_sup.detach()), "l_disc": float(loss_d.detach())}
        for name in L.COMPONENTS:
            record[name] = float(comps[name].detach()) if name in comps else 0.0
        self.loss_log.append(record)
        return record

    # -- stages ------------------------------------------------------------

    def _batches(self, stage: str):
        c = self.config
        # both stages share one stream seed so their first batches coincide
        return self.dataset.batches(c.batch_size, c.crop, _seed(c.seed, 7))

    def pretrain(self, iters: int | None = None) -> dict:
        iters = self.config.pretrain_iters if iters is None else iters
        if iters == 0:
            return self.state()
        self._require_data(paired=True)
        stream = self._batches("pretrain")
        for _ in range(iters):
            rec = self.step(next(stream), "pretrain")
            if rec["iter"] % 50 == 0:
                log.info("pretrain %d: %s", rec["iter"], {k: round(v, 4) for k, v in rec.items() if isinstance(v, float)})
        return self.state()

    def finetune(self, iters: int | None = None, probe_images=None) -> dict:
        """Contrastive finetuning; records a distance curve entry before the first step and after each epoch."""
        iters = self.config.finetune_iters if iters is None else iters
        if iters == 0:
            return self.state()
        self._require_data(paired=False)
        # the generators may move slower than the embedding side while finetuning
        lr = self.config.lr if self.config.finetune_lr is None else self.config.finetune_lr
        for group in self.opt_g.param_groups:
            group["lr"] = lr
        probes = self.probe_images() if probe_images is None else probe_images
        stream = self._batches("finetune")
        self.track_distances(probes, epoch=0)
        epoch = 0
        for _ in range(iters):
            batch = next(stream)
            if batch["epoch"] > epoch:
                epoch = batch["epoch"]
                self.track_distances(probes, epoch=epoch)
            rec = self.step(batch, "finetune")
            if rec["iter"] % 50 == 0:
                log.info("finetune %d: %s", rec["iter"], {k: round(v, 4) for k, v in rec.items() if isinstance(v, float)})
        self.track_distances(probes, epoch=epoch + 1)
        return self.state()

    # -- diagnostics -------------------------------------------------------

    def probe_images(self) -> list[np.ndarray]:
        c = self.config
        out = []
        for img in self.dataset.rainy[:c.probe_count]:
            h, w = img.shape[:2]
            t, l = (h - c.crop) // 2, (w - c.crop) // 2
            out.append(img[t:t + c.crop, l:l + c.crop] if min(h, w) >= c.crop else img)
        return out

    @torch.no_grad()
    def probe_embeddings(self, probe_images, seed: int | None = None) -> list[tuple[np.ndarray, np.ndarray]]:
        """Online layer embeddings of the sampled clean and rain clusters for each probe."""
        c, n = self.config, self.nets
        seed = c.seed if seed is None else seed
        out = []
        for i, img in enumerate(probe_images):
            O = image_to_tensor(img).to(self.device)
            B_hat, R_hat = n.g_b(O), n.g_r(O)
            smp = sample_layer_patches(tensor_to_image(B_hat), tensor_to_image(R_hat), c.sampler, _seed(seed, 99, i))
            fb = n.layer("B", B_hat, [r.top for r in smp.pos_B.refs], [r.left for r in smp.pos_B.refs], smp.pos_B.refs[0].size)
            fr = n.layer("R", R_hat, [r.top for r in smp.pos_R.refs], [r.left for r in smp.pos_R.refs], smp.pos_R.refs[0].size)
            out.append((fb.double().cpu().numpy(), fr.double().cpu().numpy()))
        return out

    def track_distances(self, probe_images, epoch: int | None = None) -> dict:
        if not len(probe_images):
            raise ConfigError("distance tracking needs at least one probe image")
        embs = self.probe_embeddings(probe_images)
        record = {
            "epoch": len(self.curve) if epoch is None else epoch,
            "iter": self.iteration,
            "intra_B": float(np.mean([pairwise_mean_distance(fb) for fb, _ in embs])),
            "intra_R": float(np.mean([pairwise_mean_distance(fr) for _, fr in embs])),
            "inter_BR": float(np.mean([pairwise_mean_distance(fb, fr) for fb, fr in embs])),
        }
        self.curve.append(record)
        return record

    @torch.no_grad()
    def derain(self, img) -> tuple[np.ndarray, np.ndarray]:
        """Clean and rain estimates for one image of any size (padded to a multiple of 4)."""
        n = self.nets
        img = np.asarray(img, dtype=np.float64)
        h, w = img.shape[:2]
        ph, pw = (-h) % 4, (-w) % 4
        x = np.pad(img, ((0, ph), (0, pw), (0, 0)), mode="symmetric") if (ph or pw) else img
        O = image_to_tensor(x).to(self.device)
        B_hat = tensor_to_image(n.g_b(O))[:h, :w]
        R_hat = tensor_to_image(n.g_r(O))[:h, :w]
        return np.clip(B_hat, 0, 1), np.clip(R_hat, 0, 1)

    def write_logs(self, out_dir) -> None:
        out = Path(out_dir)
        write_csv(out / "loss_log.csv", LOG_FIELDS, self.loss_log)
        self.curve.write_csv(out / "distance_curve.csv")


def evaluate(trainer: Trainer, dataset: SynthDataset) -> dict:
    """Mean quality of the clean estimates on a paired dataset.

    Reports PSNR/SSIM of the rainy input and of the derained output against
    the clean ground truth, plus the mean ``|O - (B + R)|`` residual.
    """
    if dataset.clean is None:
        raise ConfigError("evaluation needs clean ground truth")
    rows = []
    for name, O, clean in zip(dataset.names, dataset.rainy, dataset.clean):
        B, R = trainer.derain(O)
        rows.append({"name": name, "psnr_rainy": psnr(O, clean), "psnr_derained": psnr(B, clean),
                     "ssim_rainy": ssim(O, clean), "ssim_derained": ssim(B, clean),
                     "residual": float(np.mean(np.abs(O - (B + R))))})
    summary = {k: float(np.mean([r[k] for r in rows])) for k in rows[0] if k != "name"}
    summary["psnr_gain"] = summary["psnr_derained"] - summary["psnr_rainy"]
    return {"mean": summary, "per_image": rows}


def pretrain(config: TrainConfig, data: SynthDataset) -> dict:
    trainer = Trainer(config, data)
    return trainer.pretrain()


def finetune(config: TrainConfig, checkpoint, data: SynthDataset) -> dict:
    trainer = Trainer(config, data)
    trainer.load_state(load_checkpoint(checkpoint) if isinstance(checkpoint, (str, Path)) else checkpoint)
    return trainer.finetune()
