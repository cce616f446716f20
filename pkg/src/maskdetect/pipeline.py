"""File-staged experiment pipeline.

Every stage reads its inputs from, and writes its outputs to, the run
directory; nothing is passed in memory between stages.  ``manifest.json``
records the config snapshot, the derived seeds and a sha256 digest of
every artifact a stage produced.
"""
from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from . import asv as asv_mod
from . import attack as attack_mod
from . import corpus as corpus_mod
from . import detect as detect_mod
from . import metrics
from .config import ExperimentConfig, derive_seed
from .dsp import Waveform

log = logging.getLogger(__name__)

STAGES = ["synth", "train-asv", "attack", "search-mcs", "train-lmd", "evaluate", "report"]
STAGE_DIRS = {"synth": "synth", "train-asv": "asv", "attack": "attack", "search-mcs": "search",
              "train-lmd": "lmd", "evaluate": "evaluate", "report": "report"}


class MissingArtifact(RuntimeError):
    def __init__(self, path, stage):
        fn = "cmd_" + stage.replace("-", "_")
        super().__init__(f"{path} not found; run the '{stage}' stage ({fn}) first")
        self.path = str(path)
        self.stage = stage


def _need(path: Path, stage: str) -> Path:
    if not path.exists():
        raise MissingArtifact(path, stage)
    return path


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_tsv(path: Path, header: list, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["\t".join(header)] + ["\t".join(_fmt(v) for v in r) for r in rows]
    path.write_text("\n".join(lines) + "\n")


def read_tsv(path: Path) -> list:
    lines = path.read_text().splitlines()
    head = lines[0].split("\t")
    return [dict(zip(head, ln.split("\t"))) for ln in lines[1:] if ln]


def write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def digest_tree(root: Path, base: Path) -> dict:
    return {str(p.relative_to(base)): sha256_file(p) for p in sorted(root.rglob("*")) if p.is_file()}


# --- run context ----------------------------------------------------------------------

@dataclass
class Run:
    cfg: ExperimentConfig
    out: Path
    jobs: int = 1

    def __post_init__(self):
        self.out = Path(self.out)
        self._waves: dict = {}
        self.subtimings: dict = {}  # "stage/item" -> seconds, reported next to the stage time

    def d(self, stage: str) -> Path:
        return self.out / STAGE_DIRS[stage]

    def seed(self, stage: str, index: int = 0) -> int:
        return derive_seed(self.cfg.seed, stage, index)

    # corpus access (from files)
    def wave_of(self, uid: str) -> Waveform:
        if uid not in self._waves:
            self._waves[uid] = corpus_mod.read_wav(_need(self.d("synth") / "wav" / f"{uid}.wav", "synth"))
        return self._waves[uid]

    def trial_list(self, role: str) -> corpus_mod.TrialList:
        return corpus_mod.TrialList.from_text(_need(self.d("synth") / "lists" / f"{role}.txt", "synth").read_text(), role)

    def utt_list(self, role: str) -> list:
        return _need(self.d("synth") / "lists" / f"{role}.txt", "synth").read_text().split()

    def pools(self) -> dict:
        return json.loads(_need(self.d("synth") / "pools.json", "synth").read_text())

    def model(self, name: str = "victim") -> asv_mod.AsvModel:
        return asv_mod.AsvModel.load(_need(self.d("train-asv") / f"{name}.ckpt", "train-asv"))

    def threshold(self) -> float:
        return json.loads(_need(self.d("train-asv") / "threshold.json", "train-asv").read_text())["eta"]

    # manifest
    def record(self, stage: str, seconds: float, seeds: dict) -> None:
        path = self.out / "manifest.json"
        man = json.loads(path.read_text()) if path.exists() else {}
        man["tool_version"] = __version__
        man["config"] = json.loads(self.cfg.to_json())
        man.setdefault("stages", {})[stage] = {"artifacts": digest_tree(self.d(stage), self.out), "seeds": seeds}
        man.setdefault("timings", {})[stage] = round(seconds, 3)
        for key, sec in self.subtimings.items():
            man["timings"][f"{stage}/{key}"] = round(sec, 3)
        self.subtimings = {}
        write_json(path, man)
        (self.out / "config.json").write_text(self.cfg.to_json())


def _timed(stage):
    def deco(fn):
        def run_stage(run: Run):
            t0 = time.perf_counter()
            seeds = fn(run) or {}
            run.record(stage, time.perf_counter() - t0, seeds)
            log.info("stage %s done in %.1f s", stage, time.perf_counter() - t0)
        run_stage.__name__ = fn.__name__
        return run_stage
    return deco


# --- stages -------------------------------------------------------------------------------

@_timed("synth")
def cmd_synth(run: Run):
    c = run.cfg.corpus
    seed = run.seed("synth")
    corp = corpus_mod.make_corpus(seed, {"test": c.test_speakers, "dev": c.dev_speakers, "asv": c.asv_speakers},
                                  c.utts_per_speaker, c.duration_s)
    base = run.d("synth")
    for uid in sorted(corp.waves):
        corpus_mod.write_wav(base / "wav" / f"{uid}.wav", corp.waves[uid])
    lseed = run.seed("lists")
    attack_l, eval_l, train_l, val_l = corpus_mod.build_trial_lists(
        corp.pools["test"], corp.pools["dev"], c.utts_per_speaker, c.n_attack_pairs, lseed)
    (base / "lists").mkdir(parents=True, exist_ok=True)
    (base / "lists" / "attack.txt").write_text(attack_l.to_text())
    (base / "lists" / "eval.txt").write_text(eval_l.to_text())
    (base / "lists" / "dev_train.txt").write_text("\n".join(train_l.utterances) + "\n")
    (base / "lists" / "dev_validation.txt").write_text("\n".join(val_l.utterances) + "\n")
    write_json(base / "pools.json", corp.pools)
    return {"corpus": seed, "lists": lseed}


@_timed("train-asv")
def cmd_train_asv(run: Run):
    a = run.cfg.asv
    pools = run.pools()
    utts = run.cfg.corpus.utts_per_speaker
    byspk = {s: [run.wave_of(corpus_mod.utt_id(s, i)) for i in range(utts)] for s in pools["asv"]}
    feats = asv_mod.FeatureConfig(n_filters=a.n_filters)
    seeds = {}
    for idx, (name, ch) in enumerate((("victim", a.channels), ("substitute", a.substitute_channels))):
        seeds[name] = run.seed("train-asv", idx)
        tc = asv_mod.AsvTrainConfig(steps=a.steps, batch_speakers=a.batch_speakers, crop_frames=a.crop_frames,
                                    lr=a.lr, lr_decay_every=a.lr_decay_every, noise_prob=a.noise_prob,
                                    noise_snr=tuple(a.noise_snr), seed=seeds[name])
        t0 = time.perf_counter()
        model = asv_mod.train_asv(byspk, tc, asv_mod.AsvArch(channels=ch), feats)
        run.subtimings[name] = time.perf_counter() - t0
        model.save(run.d("train-asv") / f"{name}.ckpt")
    victim = run.model("victim")
    ev = run.trial_list("eval")
    scores = asv_mod.score_trials(ev.trials, run.wave_of, victim)
    labels = np.array([t.is_target for t in ev])
    th = asv_mod.calibrate_threshold(scores, labels)
    write_json(run.d("train-asv") / "threshold.json", {"eta": th.eta, "eer": th.eer})
    write_tsv(run.d("train-asv") / "eval_scores.tsv", ["test", "enroll", "label", "score"],
              [(t.test_id, t.enroll_id, t.is_target, s) for t, s in zip(ev, scores)])
    return seeds


def attack_plan(cfg: ExperimentConfig) -> list:
    """(set name, family, AttackConfig, source model name, number of trials or None)."""
    a = cfg.attack
    plan = []
    for n in a.bim_grid:
        plan.append((f"bim-wb-N{n}", "bim-wb", attack_mod.AttackConfig("BIM", alpha=a.bim_alpha, n_iter=n, chunk=a.chunk), "victim", None))
    for n in a.pgd_grid:
        plan.append((f"pgd-wb-N{n}", "pgd-wb", attack_mod.AttackConfig("PGD", alpha=a.pgd_alpha, n_iter=n, chunk=a.chunk), "victim", None))
    for k in a.cw_kappa:
        plan.append((f"cw-wb-k{k:g}", "cw-wb", attack_mod.AttackConfig(
            "CW", kappa=k, n_iter=a.cw_n_iter, n_binary_search=a.cw_n_binary_search, chunk=a.chunk), "victim", a.cw_trials))
    for n in a.blackbox_grid:
        plan.append((f"bim-bb-N{n}", "bim-bb", attack_mod.AttackConfig("BIM", alpha=a.bim_alpha, n_iter=n, chunk=a.chunk), "substitute", None))
    if a.purification_n not in a.bim_grid:
        plan.append((f"bim-wb-N{a.purification_n}", "purification",
                     attack_mod.AttackConfig("BIM", alpha=a.bim_alpha, n_iter=a.purification_n, chunk=a.chunk), "victim", None))
    return plan


SET_HEADER = ["index", "test", "enroll", "label", "goal", "grid", "snr_adv", "snr_gen", "success", "score",
              "iterations", "cw_c"]


@_timed("attack")
def cmd_attack(run: Run):
    eta = run.threshold()
    victim = run.model("victim")
    models = {"victim": victim, "substitute": run.model("substitute")}
    trials = run.trial_list("attack").trials
    seeds = {}
    for i, (name, _family, acfg, source, limit) in enumerate(attack_plan(run.cfg)):
        acfg.seed = run.seed("attack", i)
        seeds[name] = acfg.seed
        ctx = attack_mod.AttackContext(victim, eta, run.wave_of, None if source == "victim" else models[source])
        sel = trials if limit is None else trials[:limit]
        t0 = time.perf_counter()
        (tset,) = attack_mod.build_adversarial_sets(sel, ctx, [acfg], seed=run.seed("noise", i), name=name, jobs=run.jobs)
        run.subtimings[name] = time.perf_counter() - t0
        base = run.d("attack") / name
        rows = []
        for j, (adv, gen) in enumerate(zip(tset.adversarial, tset.genuine)):
            corpus_mod.write_wav(base / "adv" / f"{j:04d}.wav", adv.waveform)
            corpus_mod.write_wav(base / "gen" / f"{j:04d}.wav", gen.waveform)
            rows.append((j, adv.trial.test_id, adv.trial.enroll_id, adv.trial.is_target, adv.goal.kind,
                         tset.grid_value, adv.snr_db, gen.snr_db, adv.success, adv.score, adv.iterations_used,
                         "NA" if adv.cw_c is None else adv.cw_c))
        write_tsv(base / "manifest.tsv", SET_HEADER, rows)
    return seeds


@dataclass
class LoadedSet:
    name: str
    rows: list
    adv: np.ndarray
    gen: np.ndarray

    @property
    def trials(self):
        return [corpus_mod.Trial(r["test"], r["enroll"], r["label"] == "1") for r in self.rows]

    def column(self, key) -> np.ndarray:
        return np.array([float(r[key]) for r in self.rows])


def load_set(run: Run, name: str, exclude_failed: bool = False) -> LoadedSet:
    base = _need(run.d("attack") / name / "manifest.tsv", "attack").parent
    rows = read_tsv(base / "manifest.tsv")
    if exclude_failed:
        rows = [r for r in rows if r["success"] == "1"]
    adv = [corpus_mod.read_wav(base / "adv" / f"{int(r['index']):04d}.wav").samples for r in rows]
    gen = [corpus_mod.read_wav(base / "gen" / f"{int(r['index']):04d}.wav").samples for r in rows]
    shape = (0, 0)
    return LoadedSet(name, rows, np.stack(adv) if adv else np.zeros(shape), np.stack(gen) if gen else np.zeros(shape))


@_timed("search-mcs")
def cmd_search_mcs(run: Run):
    s = run.cfg.search
    victim = run.model("victim")
    train = run.utt_list("dev_train")
    out, seeds = {}, {}
    for variant, upper in (("H", None), ("D", s.d_upper)):
        ps = []
        for r in range(s.runs):
            sd = run.seed(f"search-mcs-{variant}", r)
            seeds[f"{variant}{r}"] = sd
            res = detect_mod.search_mcs(variant, victim, train, run.wave_of, sd, s.batch, s.crop_frames, s.max_iter, upper)
            ps.append(res.p)
        ps = np.array(ps)
        out[variant] = {"runs": ps.tolist(), "mean": float(ps.mean()), "std": float(ps.std()),
                        "p": float(np.round(ps.mean()))}
    write_json(run.d("search-mcs") / "results.json", out)
    return seeds


@_timed("train-lmd")
def cmd_train_lmd(run: Run):
    c = run.cfg.lmd
    victim = run.model("victim")
    train, val = run.utt_list("dev_train"), run.utt_list("dev_validation")
    seeds = {}
    for i, (name, lb) in enumerate(sorted(c.variants.items())):
        seeds[name] = run.seed("train-lmd", i)
        tc = detect_mod.LmdTrainConfig(steps=c.steps, batch=c.batch, crop_frames=c.crop_frames, lr=c.lr,
                                       lr_decay=c.lr_decay, decay_every=c.decay_every, val_every=c.val_every,
                                       m=c.m, lambda_s=c.lambda_s, lambda_b=lb, seed=seeds[name])
        t0 = time.perf_counter()
        model = detect_mod.train_lmd(train, val, run.wave_of, victim, tc)
        run.subtimings[name] = time.perf_counter() - t0
        model.save(run.d("train-lmd") / f"{name}.ckpt")
        hist = model.meta["history"]
        write_tsv(run.d("train-lmd") / f"{name}_train_loss.tsv", ["step", "total", "L_m", "L_s", "L_b"],
                  [(i + 1,) + tuple(h) for i, h in enumerate(hist["train"])])
        write_tsv(run.d("train-lmd") / f"{name}_validation_loss.tsv", ["step", "total"], hist["validation"])
    return seeds


def detectors(run: Run) -> dict:
    res = json.loads(_need(run.d("search-mcs") / "results.json", "search-mcs").read_text())
    dets = {"mcs-h": detect_mod.MCSH(int(res["H"]["p"])), "mcs-d": detect_mod.MCSD(float(res["D"]["p"]))}
    for name in sorted(run.cfg.lmd.variants):
        path = _need(run.d("train-lmd") / f"{name}.ckpt", "train-lmd")
        dets[f"lmd-{name}"] = detect_mod.LMD(detect_mod.LmdModel.load(path))
    dets["lmd-untrained"] = detect_mod.LMD(detect_mod.init_lmd(run.seed("lmd-untrained")))
    return dets


@_timed("evaluate")
def cmd_evaluate(run: Run):
    ecfg = run.cfg.evaluate
    victim = run.model("victim")
    eta = run.threshold()
    dets = detectors(run)
    plan = attack_plan(run.cfg)
    base = run.d("evaluate")
    report = metrics.EvalReport()
    ev = run.trial_list("eval")

    # ASV baseline on the genuine eval list
    s_ev = asv_mod.score_trials(ev.trials, run.wave_of, victim)
    lab = np.array([t.is_target for t in ev])
    report.add("eer", "asv/eval", metrics.asv_eer(s_ev[lab], s_ev[~lab])[0])
    report.add("min_dcf", f"asv/eval/p={ecfg.min_dcf_p:g}", metrics.min_dcf(s_ev[lab], s_ev[~lab], ecfg.min_dcf_p))

    # variation sets
    var = {}
    asr_rows = []
    for name, family, _acfg, _src, _lim in plan:
        ls = load_set(run, name, run.cfg.exclude_failed_adv)
        full = load_set(run, name) if run.cfg.exclude_failed_adv else ls
        goals = np.array([1 if r["goal"] == "impersonation" else -1 for r in full.rows])
        asr_v = metrics.asr(full.column("score"), goals, eta)
        report.add("asr", f"{name}", asr_v)
        asr_rows.append((name, family, asr_v, float(full.column("snr_adv").mean()), len(full.rows)))
        if not ls.rows:
            continue
        enroll = asv_mod.embed_waves([run.wave_of(t.enroll_id) for t in ls.trials], victim)
        for dname, det in dets.items():
            sa, sha = detect_mod.score_pairs(ls.adv, enroll, victim, det)
            sg, shg = detect_mod.score_pairs(ls.gen, enroll, victim, det)
            var[(dname, name)] = (family, ls, np.abs(sa - sha), np.abs(sg - shg))
            write_tsv(base / "variations" / dname / f"{name}.tsv",
                      ["index", "s_adv", "s_hat_adv", "v_adv", "snr_adv", "s_gen", "s_hat_gen", "v_gen", "snr_gen"],
                      [(r["index"], sa[i], sha[i], abs(sa[i] - sha[i]), r["snr_adv"], sg[i], shg[i],
                        abs(sg[i] - shg[i]), r["snr_gen"]) for i, r in enumerate(ls.rows)])
    write_tsv(base / "asr.tsv", ["set", "family", "asr", "mean_snr_db", "n"], asr_rows)

    eer_rows, dsr_rows = [], []
    for (dname, name), (family, _ls, va, vg) in var.items():
        e, tau = metrics.eer(vg, va)
        report.add("eer", f"{dname}/{name}", e)
        eer_rows.append((dname, name, e, tau))
    families = sorted({f for _, f, *_ in plan if f != "purification"})
    for dname in dets:
        for fam in families:
            parts = [(v, ls) for (dn, _n), (f, ls, *v) in var.items() if dn == dname and f == fam]
            if not parts:
                continue
            va = np.concatenate([p[0][0] for p in parts])
            vg = np.concatenate([p[0][1] for p in parts])
            sa = np.concatenate([p[1].column("snr_adv") for p in parts])
            sg = np.concatenate([p[1].column("snr_gen") for p in parts])
            e, tau = metrics.eer(vg, va)
            report.add("eer", f"{dname}/{fam}-mix", e)
            eer_rows.append((dname, f"{fam}-mix", e, tau))
            for far in ecfg.far_grid:
                dsr, t = metrics.dsr_at_far(vg, va, far)
                report.add("dsr", f"{dname}/{fam}-mix/far={far:g}", dsr)
                dsr_rows.append((dname, f"{fam}-mix", far, dsr, t))
            budgets = [-np.inf] + list(ecfg.snr_budgets)
            curve = metrics.snr_budget_curve(vg, va, sg, sa, budgets, ecfg.budget_mode)
            write_tsv(base / "snr_budget" / f"{dname}_{fam}.tsv", ["budget_db", "eer"], curve)
            write_tsv(base / "det" / f"{dname}_{fam}.tsv", ["far", "frr"], metrics.det_curve(vg, va))
    write_tsv(base / "eer_table.tsv", ["detector", "set", "eer", "tau"], eer_rows)
    write_tsv(base / "dsr_table.tsv", ["detector", "set", "far_given", "dsr", "tau"], dsr_rows)

    # boxplot data: largest white-box BIM grid point
    big = f"bim-wb-N{max(run.cfg.attack.bim_grid)}"
    box = []
    for dname in dets:
        if (dname, big) in var:
            _f, _ls, va, vg = var[(dname, big)]
            box += [(dname, "adversarial", v) for v in va] + [(dname, "genuine", v) for v in vg]
    write_tsv(base / "boxplot.tsv", ["detector", "origin", "variation"], box)

    # purification: adversarial tests (attack list) scored against eval-list enrollments
    pname = f"bim-wb-N{run.cfg.attack.purification_n}"
    pset = load_set(run, pname)
    override = {i: Waveform(pset.adv[i]) for i in range(len(pset.rows))}
    pur_rows = []
    for dname, det in [("none", detect_mod.Identity())] + list(dets.items()):
        g = metrics.purification_eer(ev.trials, run.wave_of, victim, det)
        a = metrics.purification_eer(ev.trials, run.wave_of, victim, det, override)
        report.add("eer", f"purification/{dname}/genuine", g)
        report.add("eer", f"purification/{dname}/{pname}", a)
        pur_rows.append((dname, g, a))
    write_tsv(base / "purification.tsv", ["detector", "eer_genuine", f"eer_{pname}"], pur_rows)

    (base / "report.txt").write_text(report.to_text())
    write_json(base / "report.json", report.to_dict())


@_timed("report")
def cmd_report(run: Run):
    ev = _need(run.d("evaluate") / "report.txt", "evaluate").read_text()
    th = json.loads(_need(run.d("train-asv") / "threshold.json", "train-asv").read_text())
    search = json.loads(_need(run.d("search-mcs") / "results.json", "search-mcs").read_text())
    lines = ["maskdetect run report", "=" * 21, "",
             f"ASV decision threshold eta = {th['eta']:.6f} (eval-list EER {th['eer']:.4f})", "",
             "MCS hyperparameter search (mean +- std over runs):"]
    for v, r in sorted(search.items()):
        lines.append(f"  MCS-{v}: {r['mean']:.2f} +- {r['std']:.2f} -> {r['p']:g}")
    lines += ["", "Attack success:"]
    for r in read_tsv(run.d("evaluate") / "asr.tsv"):
        lines.append(f"  {r['set']:<16} ASR {float(r['asr']):.3f}  mean SNR {float(r['mean_snr_db']):6.2f} dB  n={r['n']}")
    lines += ["", "Detection EER (adversarial vs. noise-matched genuine):"]
    for r in read_tsv(run.d("evaluate") / "eer_table.tsv"):
        lines.append(f"  {r['detector']:<14} {r['set']:<18} {100 * float(r['eer']):6.2f} %")
    lines += ["", "Purification (ASV EER with the detector transform as a front end):"]
    for r in read_tsv(run.d("evaluate") / "purification.tsv"):
        vals = list(r.values())
        lines.append(f"  {vals[0]:<14} genuine {100 * float(vals[1]):6.2f} %   adversarial {100 * float(vals[2]):6.2f} %")
    lines += ["", "All metrics:", ev]
    run.d("report").mkdir(parents=True, exist_ok=True)
    (run.d("report") / "report.txt").write_text("\n".join(lines))


COMMANDS = {"synth": cmd_synth, "train-asv": cmd_train_asv, "attack": cmd_attack, "search-mcs": cmd_search_mcs,
            "train-lmd": cmd_train_lmd, "evaluate": cmd_evaluate, "report": cmd_report}


def run_all(run: Run) -> None:
    for stage in STAGES:
        COMMANDS[stage](run)
