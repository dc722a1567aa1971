"""
ColaCare command-line driver.

Subcommands operate on a run directory and hand artifacts to each other:

    data/         dataset.json, split.json, specs.json, corpus.jsonl, demo_script.json
    checkpoints/  <expert>.params.json + <expert>.config.json, fusion.*
    index/        index.json
    transcripts/  <patient-id>.json
    results/      results.json, ledger.json, dataset_stats.json, explain_*.json, agent_sweep.json
    stats.json

Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.
"""

import argparse
import itertools
import json
import logging
import os
import sys
from dataclasses import replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .attribution import explain, top_features
from .config import ConfigError, RunConfig
from .consultation import ConsultationStats, load_transcripts, run_cohort
from .ehr_data import (
    DatasetSplit,
    FeatureSpec,
    PatientRecord,
    fit_statistics,
    generate_synthetic,
    load_dataset,
    prepare,
    save_dataset,
    select,
    split,
    split_statistics,
)
from .evaluation import BootstrapSummary, auprc, bootstrap, format_table, save_results
from .expert_models import ExpertModel, grid_search, train_expert
from .fusion import FusionModel, build_fusion_samples, train_fusion
from .llm_gateway import (
    HttpEmbedder,
    ScriptedProvider,
    build_demo_script,
    make_provider,
    save_script,
)
from .retrieval import CorpusIndex, Embedder, HashEmbedder, ingest_corpus

logger = logging.getLogger(__name__)

METHOD_LLM_OUTPUT = "ColaCare_LLM-Output"
METHOD_FUSION = "ColaCare"


class MissingArtifactError(FileNotFoundError):
    """Raised when a command needs an artifact an upstream command produces."""


class UsageError(ConfigError):
    """Raised for command-line usage errors."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# -- run directory ----------------------------------------------------------------------------

class RunPaths:
    """File layout of one run directory."""

    def __init__(self, root: str):
        self.root = root
        self.data = os.path.join(root, "data")
        self.checkpoints = os.path.join(root, "checkpoints")
        self.index_dir = os.path.join(root, "index")
        self.transcripts = os.path.join(root, "transcripts")
        self.results = os.path.join(root, "results")
        self.dataset = os.path.join(self.data, "dataset.json")
        self.split = os.path.join(self.data, "split.json")
        self.specs = os.path.join(self.data, "specs.json")
        self.corpus = os.path.join(self.data, "corpus.jsonl")
        self.script = os.path.join(self.data, "demo_script.json")
        self.index = os.path.join(self.index_dir, "index.json")
        self.stats = os.path.join(root, "stats.json")
        self.ledger = os.path.join(self.results, "ledger.json")
        self.results_file = os.path.join(self.results, "results.json")

    def ensure(self):
        for directory in (self.data, self.checkpoints, self.index_dir, self.transcripts, self.results):
            os.makedirs(directory, exist_ok=True)

    @staticmethod
    def require(path: str, command: str):
        if not os.path.exists(path):
            raise MissingArtifactError(f"{path} not found; run `colacare {command}` first")


def _write_json(path: str, payload):
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)


def _read_json(path: str):
    with open(path, "r") as f:
        return json.load(f)


def _load_split(paths: RunPaths) -> DatasetSplit:
    paths.require(paths.split, "synth")
    return DatasetSplit.from_dict(_read_json(paths.split))


def _load_prepared(paths: RunPaths) -> Tuple[List[FeatureSpec], List[PatientRecord], DatasetSplit]:
    """Fitted specs, imputed + normalized records and the split."""
    paths.require(paths.dataset, "synth")
    paths.require(paths.specs, "train-experts")
    _, raw = load_dataset(paths.dataset)
    specs = [FeatureSpec.from_dict(s) for s in _read_json(paths.specs)]
    return specs, prepare(raw, specs), _load_split(paths)


def _load_experts(paths: RunPaths, config: RunConfig) -> List[ExpertModel]:
    experts = []
    for expert_config in config.experts:
        sidecar = os.path.join(paths.checkpoints, f"{expert_config.name}.config.json")
        paths.require(sidecar, "train-experts")
        experts.append(ExpertModel.load(paths.checkpoints, expert_config.name))
    return experts


def _expert_checkpoints(paths: RunPaths) -> List[str]:
    if not os.path.isdir(paths.checkpoints):
        return []
    return sorted(
        name[:-len(".config.json")] for name in os.listdir(paths.checkpoints) if name.endswith(".config.json")
    )


def _embedder(config: RunConfig) -> Embedder:
    if config.provider.kind == "http" and config.provider.embedding_model:
        return HttpEmbedder(config.provider, dim=config.embedding_dim)
    return HashEmbedder(config.embedding_dim)


# -- demo corpus ------------------------------------------------------------------------------

_GUIDANCE = {
    "lactate": "Elevated lactate reflects tissue hypoperfusion; levels above 4 mmol/L in sepsis are associated with markedly higher mortality, and a rising lactate despite resuscitation signals shock progression.",
    "creatinine": "Rising serum creatinine indicates acute kidney injury; each KDIGO stage increase is associated with higher in-hospital mortality and longer stays.",
    "systolic_bp": "Systolic blood pressure below 90 mmHg defines hypotension; sustained hypotension requiring vasopressors is a hallmark of septic shock and predicts death.",
    "oxygen_saturation": "Falling oxygen saturation signals respiratory failure; saturation persistently below 90 percent despite supplemental oxygen warrants escalation of care.",
    "heart_rate": "Tachycardia above 100 beats per minute is a systemic inflammatory response criterion and often accompanies hypovolaemia, sepsis or arrhythmia.",
    "respiratory_rate": "A respiratory rate above 22 breaths per minute is part of the quick SOFA score and identifies patients at risk of poor outcome.",
    "temperature": "Fever or hypothermia are systemic inflammatory response criteria; hypothermia in sepsis carries a worse prognosis than fever.",
    "glucose": "Stress hyperglycaemia is common in critical illness; both severe hyperglycaemia and hypoglycaemia are associated with increased mortality.",
    "white_blood_cells": "Leukocytosis or leukopenia may indicate infection; leukopenia in sepsis is associated with worse outcomes.",
    "hemoglobin": "Anaemia in critical illness reduces oxygen delivery; a restrictive transfusion threshold of 7 g/dL is recommended for most patients.",
}


def demo_corpus(specs: Sequence[FeatureSpec]) -> List[Dict[str, str]]:
    """Small guideline corpus covering the synthetic features, for offline runs."""
    docs = []
    for i, spec in enumerate(specs):
        label = spec.name.replace("_", " ")
        guidance = _GUIDANCE.get(spec.name, f"{label.capitalize()} is monitored during the stay; "
                                            f"abnormal or worsening values should be interpreted in clinical context.")
        text = (
            f"{label.capitalize()} ({spec.unit or 'unitless'}). {guidance} "
            f"Clinicians should review the trend of {label} across visits rather than a single value, "
            f"because persistent deterioration in {label} predicts poor outcomes more reliably than an "
            f"isolated abnormal measurement. Interpretation of {label} must account for comorbidities, "
            f"current treatment and the overall trajectory of the patient."
        )
        docs.append({"id": f"doc{i:03d}", "title": f"Clinical guidance: {label}", "text": text})
    docs.append({
        "id": "doc900",
        "title": "Mortality risk assessment in hospitalised adults",
        "text": (
            "Early warning scores combine vital signs and laboratory values to identify deteriorating patients. "
            "High risk of in-hospital mortality is suggested by hypotension, rising lactate, worsening renal "
            "function and falling oxygen saturation, especially when several abnormalities coexist. Low risk "
            "patients show stable or improving trends across consecutive visits."
        ),
    })
    return docs


# -- commands ---------------------------------------------------------------------------------

def cmd_synth(args, config: RunConfig, paths: RunPaths) -> int:
    """Create (or import) the dataset, the stratified split and the demo corpus."""
    if config.dataset:
        specs, records = load_dataset(config.dataset)
        print(f"📂 Imported {len(records)} patients from {config.dataset}")
    else:
        s = config.synthetic
        specs, records = generate_synthetic(s.n_patients, s.n_features, s.max_visits, s.seed)
        print(f"🧪 Generated {len(records)} synthetic patients (F={s.n_features}, seed={s.seed})")
    save_dataset(paths.dataset, specs, records)
    data_split = split(records, config.split_ratios, config.seed)
    _write_json(paths.split, data_split.to_dict())
    with open(paths.corpus, "w") as f:
        for doc in demo_corpus(specs):
            f.write(json.dumps(doc, sort_keys=True) + "\n")
    print(f"✅ Split {len(data_split.train)}/{len(data_split.val)}/{len(data_split.test)} written to {paths.split}")
    return 0


def cmd_describe(args, config: RunConfig, paths: RunPaths) -> int:
    paths.require(paths.dataset, "synth")
    _, records = load_dataset(paths.dataset)
    rows = split_statistics(records, _load_split(paths))
    _write_json(os.path.join(paths.results, "dataset_stats.json"), rows)
    print(f"{'Split':<8} {'# Samples':>16} {'# Label=1':>16}")
    for row in rows:
        print(f"{row['split']:<8} {row['samples']:>6} ({row['samples_pct']:5.1f}%) "
              f"{row['positives']:>6} ({row['positives_pct']:5.1f}%)")
    return 0


def cmd_train_experts(args, config: RunConfig, paths: RunPaths) -> int:
    paths.require(paths.dataset, "synth")
    raw_specs, raw = load_dataset(paths.dataset)
    data_split = _load_split(paths)
    specs = fit_statistics(raw_specs, raw, data_split.train)
    _write_json(paths.specs, [s.to_dict() for s in specs])
    records = prepare(raw, specs)

    for expert_config in config.experts:
        if args.grid:
            model = grid_search(expert_config, specs, records, data_split)
        else:
            model = train_expert(expert_config, specs, records, data_split, show_progress=not args.quiet)
        model.save(paths.checkpoints)
        best = max(model.history, key=lambda h: h.val_auprc) if model.history else None
        if best is not None:
            print(f"✅ {model.name}: best val AUPRC {best.val_auprc:.4f} (AUROC {best.val_auroc:.4f}) "
                  f"at epoch {best.epoch}")
    return 0


def cmd_explain(args, config: RunConfig, paths: RunPaths) -> int:
    specs, records, data_split = _load_prepared(paths)
    experts = _load_experts(paths, config)
    patient_id = args.patient or data_split.test[0]
    record = select(records, [patient_id])[0]
    _, raw = load_dataset(paths.dataset)
    raw_record = select(raw, [patient_id])[0]

    payload = {"patient_id": patient_id, "experts": {}}
    print(f"🔎 Feature importances for {patient_id} (label {record.label})")
    for expert in experts:
        result = explain(expert.value_function(record), record, specs, method=args.method,
                         n_permutations=args.permutations, seed=config.seed)
        ranked = top_features(result, specs, args.top, record=raw_record)
        payload["experts"][expert.name] = {
            "attribution": result.to_dict(),
            "top": [{"name": f.name, "phi": f.phi, "index": f.index} for f in ranked],
        }
        print(f"  {expert.name}: risk {result.actual_value:.3f} (baseline {result.baseline_value:.3f}, {result.method})")
        for feat in ranked:
            print(f"    {feat.name:<24} {feat.phi:+.4f}")
    _write_json(os.path.join(paths.results, f"explain_{patient_id}.json"), payload)
    return 0


def cmd_build_index(args, config: RunConfig, paths: RunPaths) -> int:
    corpus = config.corpus or paths.corpus
    paths.require(corpus, "synth")
    index = ingest_corpus(corpus, config.chunk_size, config.overlap, _embedder(config))
    index.save(paths.index)
    print(f"✅ Indexed {len(index)} chunks (d={index.dim}) into {paths.index}")
    return 0


def _expert_scores(experts: Sequence[ExpertModel], records: Sequence[PatientRecord]) -> Dict[str, np.ndarray]:
    return {e.name: e.predict_scores(records) for e in experts}


def _provider(config: RunConfig, paths: RunPaths, experts: Sequence[ExpertModel],
              records: Sequence[PatientRecord], n_doctors: int, script_path: Optional[str] = None):
    """Configured provider; a scripted run without a script gets a generated demo script."""
    if config.provider.kind == "http" or config.provider.script_path:
        return make_provider(config.provider)
    scores = _expert_scores(experts, records)
    means = {r.patient_id: float(np.mean([scores[e.name][i] for e in experts])) for i, r in enumerate(records)}
    rules = build_demo_script(records, config.informative_rate, config.seed, means, n_doctors=n_doctors)
    path = script_path or paths.script
    save_script(path, rules)
    return ScriptedProvider(rules, name=f"scripted:{os.path.basename(path)}")


def _consult(config: RunConfig, paths: RunPaths, experts: Sequence[ExpertModel], specs, records, parallel: int,
             transcript_dir: Optional[str], quiet: bool, script_path: Optional[str] = None):
    paths.require(paths.index, "build-index")
    index = CorpusIndex.load(paths.index)
    consultation = replace(config.consultation, n_doctors=len(experts), parallelism=parallel,
                           price_input_per_million=config.provider.price_input_per_million,
                           price_output_per_million=config.provider.price_output_per_million)
    provider = _provider(config, paths, experts, records, len(experts), script_path)
    return run_cohort(consultation, records, experts, specs, index, provider, embedder=_embedder(config),
                      transcript_dir=transcript_dir, show_progress=not quiet)


def cmd_consult(args, config: RunConfig, paths: RunPaths) -> int:
    available = _expert_checkpoints(paths)
    if not available:
        raise MissingArtifactError(f"No expert checkpoints in {paths.checkpoints}; run `colacare train-experts` first")
    n_doctors = args.n_doctors or config.consultation.n_doctors
    if n_doctors != len(available):
        raise ConfigError(f"n_doctors={n_doctors} but {len(available)} expert checkpoints found: {available}")
    specs, records, data_split = _load_prepared(paths)
    experts = _load_experts(paths, config)
    if args.patients == "test":
        records = select(records, data_split.test)
    elif args.limit:
        records = records[:args.limit]

    transcripts, stats, ledger = _consult(config, paths, experts, specs, records, args.parallel,
                                          paths.transcripts, args.quiet)
    stats.save(paths.stats)
    _write_json(paths.ledger, ledger.to_dict())
    print(f"✅ {len(transcripts)} consultations: avg rounds {stats.avg_rounds:.2f}, "
          f"consensus {stats.consensus_rate:.1f}%, aborted {stats.n_aborted}, "
          f"cost/sample ${stats.cost_per_sample:.5f}")
    return 0


def _final_reports(transcripts) -> Dict[str, str]:
    return {t.patient_id: t.final_report.narrative for t in transcripts if t.final_report is not None}


def cmd_train_fusion(args, config: RunConfig, paths: RunPaths) -> int:
    specs, records, data_split = _load_prepared(paths)
    experts = _load_experts(paths, config)
    transcripts = load_transcripts(paths.transcripts)
    if not transcripts:
        raise MissingArtifactError(f"No transcripts in {paths.transcripts}; run `colacare consult` first")
    fusion_config = replace(config.fusion, report_mode=args.report_mode or config.fusion.report_mode)
    samples = build_fusion_samples(records, experts, _final_reports(transcripts), _embedder(config),
                                   report_mode=fusion_config.report_mode)
    model = train_fusion(fusion_config, samples, data_split, show_progress=not args.quiet)
    model.save(paths.checkpoints)
    best = max(h["val_auprc"] for h in model.history)
    print(f"✅ Fusion network trained ({model.schema.input_dim} inputs); best val AUPRC {best:.4f}")
    return 0


def _best_expert(experts: Sequence[ExpertModel], records, data_split: DatasetSplit) -> ExpertModel:
    val = select(records, data_split.val)
    labels = np.array([r.label for r in val])
    return max(experts, key=lambda e: auprc(labels, e.predict_scores(val)))


def _summaries(config: RunConfig, labels: np.ndarray, methods: Dict[str, np.ndarray]) -> Dict[str, BootstrapSummary]:
    ev = config.evaluation
    return {name: bootstrap(labels, scores, ev.n_bootstrap, ev.seed) for name, scores in methods.items()}


def cmd_evaluate(args, config: RunConfig, paths: RunPaths) -> int:
    specs, records, data_split = _load_prepared(paths)
    experts = _load_experts(paths, config)
    paths.require(os.path.join(paths.checkpoints, "fusion.schema.json"), "train-fusion")
    fusion = FusionModel.load(paths.checkpoints)
    test = select(records, data_split.test)
    labels = np.array([r.label for r in test])

    transcripts = {t.patient_id: t for t in load_transcripts(paths.transcripts)}
    missing = [r.patient_id for r in test if r.patient_id not in transcripts]
    if missing:
        raise MissingArtifactError(f"No transcripts for {len(missing)} test patients; run `colacare consult` first")

    best = _best_expert(experts, records, data_split)
    variant = []
    for r in test:
        t = transcripts[r.patient_id]
        variant.append(t.variant.probability if t.variant is not None else float(np.mean(t.expert_logits)))
    samples = build_fusion_samples(test, experts, _final_reports(transcripts.values()), _embedder(config),
                                   report_mode=fusion.config.report_mode)

    summaries = _summaries(config, labels, {
        f"Best expert ({best.name})": best.predict_scores(test),
        METHOD_LLM_OUTPUT: np.array(variant),
        METHOD_FUSION: fusion.predict(samples),
    })
    save_results(paths.results_file, summaries)
    print(format_table(summaries))
    return 0


def cmd_stats(args, config: RunConfig, paths: RunPaths) -> int:
    paths.require(paths.stats, "consult")
    stats = ConsultationStats(**_read_json(paths.stats))
    doctors = sorted(stats.doctor_votes)
    header = ["Avg rounds", "Consensus %"] + [f"{d} agree/disagree %" for d in doctors]
    cells = [f"{stats.avg_rounds:.2f}", f"{stats.consensus_rate:.2f}"] + [
        f"{stats.doctor_votes[d]['agree_pct']:.2f} / {stats.doctor_votes[d]['disagree_pct']:.2f}" for d in doctors
    ]
    print(" | ".join(header))
    print(" | ".join(c.ljust(len(h)) for c, h in zip(cells, header)))
    print(f"Patients {stats.n_patients} (aborted {stats.n_aborted}), cost per sample ${stats.cost_per_sample:.5f}")
    for role, tokens in stats.tokens_per_patient.items():
        print(f"  {role:<10} avg input {tokens['avg_input_tokens']:9.1f}  avg output {tokens['avg_output_tokens']:8.1f}")
    return 0


def cmd_sweep_agents(args, config: RunConfig, paths: RunPaths) -> int:
    """Fusion performance for every non-empty subset of doctors; 0 agents = single experts."""
    specs, records, data_split = _load_prepared(paths)
    experts = _load_experts(paths, config)
    test = select(records, data_split.test)
    labels = np.array([r.label for r in test])
    sweep_root = os.path.join(paths.results, "sweep")
    os.makedirs(sweep_root, exist_ok=True)

    methods: Dict[str, np.ndarray] = {f"0 agents: {e.name}": e.predict_scores(test) for e in experts}
    for size in range(1, len(experts) + 1):
        for subset in itertools.combinations(experts, size):
            tag = "+".join(e.name for e in subset)
            script_path = os.path.join(sweep_root, f"{tag}.script.json")
            transcripts, _, _ = _consult(config, paths, subset, specs, records, args.parallel, None,
                                         args.quiet, script_path)
            samples = build_fusion_samples(records, subset, _final_reports(transcripts), _embedder(config),
                                           report_mode=config.fusion.report_mode)
            model = train_fusion(config.fusion, samples, data_split)
            test_ids = set(data_split.test)
            methods[f"{size} agents: {tag}"] = model.predict([s for s in samples if s.patient_id in test_ids])
            print(f"  swept {tag}")

    summaries = _summaries(config, labels, methods)
    save_results(os.path.join(paths.results, "agent_sweep.json"), summaries)
    print(format_table(summaries))
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "describe": cmd_describe,
    "train-experts": cmd_train_experts,
    "explain": cmd_explain,
    "build-index": cmd_build_index,
    "consult": cmd_consult,
    "train-fusion": cmd_train_fusion,
    "evaluate": cmd_evaluate,
    "stats": cmd_stats,
    "sweep-agents": cmd_sweep_agents,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="Run configuration JSON file")
    common.add_argument("--run-dir", help="Run directory (overrides run_dir from the config)")
    common.add_argument("--verbose", action="store_true", help="Enable debug logging")
    common.add_argument("--quiet", action="store_true", help="Disable progress bars and info logging")

    parser = _Parser(prog="colacare", description="ColaCare: expert models, LLM consultation and fusion")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    sub.add_parser("synth", parents=[common], help="Generate or import the dataset and split it")
    sub.add_parser("describe", parents=[common], help="Print dataset split statistics")

    p = sub.add_parser("train-experts", parents=[common], help="Train the expert models")
    p.add_argument("--grid", action="store_true", help="Grid search learning rate and hidden size per expert")

    p = sub.add_parser("explain", parents=[common], help="Shapley feature importances for one patient")
    p.add_argument("--patient", help="Patient id (default: first test patient)")
    p.add_argument("--method", choices=["auto", "exact", "sampled"], default="auto", help="Attribution method")
    p.add_argument("--permutations", type=int, default=200, help="Permutations for sampled attribution")
    p.add_argument("--top", type=int, default=10, help="Number of features to list")

    sub.add_parser("build-index", parents=[common], help="Chunk and embed the guideline corpus")

    p = sub.add_parser("consult", parents=[common], help="Run the multi-agent consultation")
    p.add_argument("--parallel", type=int, default=1, help="Patients consulted concurrently")
    p.add_argument("--n-doctors", type=int, help="Expected number of doctors (must match expert checkpoints)")
    p.add_argument("--patients", choices=["all", "test"], default="all", help="Which patients to consult")
    p.add_argument("--limit", type=int, help="Consult only the first N patients (with --patients all)")

    p = sub.add_parser("train-fusion", parents=[common], help="Train the fusion network")
    p.add_argument("--report-mode", choices=["report", "constant", "none"],
                   help="Report channel: real report embeddings, a constant vector, or none")

    sub.add_parser("evaluate", parents=[common], help="Bootstrap evaluation on the test split")
    sub.add_parser("stats", parents=[common], help="Print consultation statistics")

    p = sub.add_parser("sweep-agents", parents=[common], help="Fusion results for every subset of doctors")
    p.add_argument("--parallel", type=int, default=1, help="Patients consulted concurrently")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"❌ {e}", file=sys.stderr)
        return 1

    level = logging.DEBUG if args.verbose else (logging.WARNING if args.quiet else logging.INFO)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    try:
        config = RunConfig.from_file(args.config) if args.config else RunConfig()
        if args.run_dir:
            config.run_dir = args.run_dir
        config.validate()
        paths = RunPaths(config.run_dir)
        paths.ensure()
        return COMMANDS[args.command](args, config, paths)
    except (ConfigError, MissingArtifactError) as e:
        print(f"❌ {e}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        print("\n🛑 Interrupted by user", file=sys.stderr)
        return 2
    except Exception as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"❌ {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
