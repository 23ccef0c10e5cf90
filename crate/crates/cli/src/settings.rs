//! Merge INI configuration with command-line flags; flags win.
//!
//! Recognised keys:
//!
//! ```ini
//! [run]        system, seed, ranker, min_grade, tag
//! [budget]     c, b, cb, per_call_ms
//! [scheduler]  s, lambda, u, v, random_alpha_first_batch, first_stage_depth
//! [bm25]       k1, b
//! [rm3]        fb_docs, fb_terms, orig_weight
//! [fusion]     rrf_k, cc_lambda
//! [exhaustive] cap
//! [data]       dir, corpus, index, queries, qrels, embeddings,
//!              query_embeddings, graph, metric, psi, psi_queries
//! ```

use std::path::PathBuf;
use std::str::FromStr;

use ore_core::config::Config;
use ore_core::engine::{RankerSpec, RunOptions, System};
use ore_core::lexical::{Bm25Params, Rm3Params};
use ore_core::rankers::BudgetLedger;

use crate::error::{CliError, CliResult};
use crate::{DataArgs, TuneArgs};

pub struct Settings {
    cfg: Config,
}

impl Settings {
    pub fn load(path: Option<&PathBuf>) -> CliResult<Self> {
        let cfg = match path {
            Some(p) => Config::load(p)?,
            None => Config::default(),
        };
        Ok(Self { cfg })
    }

    fn pick<T: FromStr>(&self, flag: Option<T>, section: &str, key: &str, default: T) -> CliResult<T> {
        match flag {
            Some(v) => Ok(v),
            None => Ok(self.cfg.get_or(section, key, default)?),
        }
    }

    fn pick_opt<T: FromStr>(&self, flag: Option<T>, section: &str, key: &str) -> CliResult<Option<T>> {
        match flag {
            Some(v) => Ok(Some(v)),
            None => Ok(self.cfg.get(section, key)?),
        }
    }

    fn flag_bool(&self, flag: bool, section: &str, key: &str) -> CliResult<bool> {
        Ok(flag || self.cfg.get_or(section, key, false)?)
    }

    pub fn bm25(&self, k1: Option<f64>, b: Option<f64>) -> CliResult<Bm25Params> {
        let d = Bm25Params::default();
        Ok(Bm25Params {
            k1: self.pick(k1, "bm25", "k1", d.k1)?,
            b: self.pick(b, "bm25", "b", d.b)?,
        })
    }

    pub fn data(&self, args: &DataArgs) -> CliResult<DataArgs> {
        let path = |flag: &Option<PathBuf>, key: &str| -> CliResult<Option<PathBuf>> {
            self.pick_opt(flag.clone(), "data", key)
        };
        Ok(DataArgs {
            data: path(&args.data, "dir")?,
            corpus: path(&args.corpus, "corpus")?,
            index: path(&args.index, "index")?,
            queries: path(&args.queries, "queries")?,
            qrels: path(&args.qrels, "qrels")?,
            embeddings: path(&args.embeddings, "embeddings")?,
            query_embeddings: path(&args.query_embeddings, "query_embeddings")?,
            graph: path(&args.graph, "graph")?,
            metric: self.pick_opt(args.metric.clone(), "data", "metric")?,
            psi: self.pick_opt(args.psi.clone(), "data", "psi")?,
            psi_queries: path(&args.psi_queries, "psi_queries")?,
        })
    }

    pub fn ranker(&self, tune: &TuneArgs) -> CliResult<RankerSpec> {
        let raw = self.pick(tune.ranker.clone(), "run", "ranker", "graded:0.25".to_string())?;
        Ok(raw.parse()?)
    }

    pub fn min_grade(&self, tune: &TuneArgs) -> CliResult<u8> {
        self.pick(tune.min_grade, "run", "min_grade", 1)
    }

    pub fn system(&self, flag: Option<&String>) -> CliResult<System> {
        let raw: Option<String> = self.pick_opt(flag.cloned(), "run", "system")?;
        let raw = raw.ok_or_else(|| CliError::usage("--system is required"))?;
        Ok(raw.parse()?)
    }

    pub fn tag(&self, flag: Option<&String>, system: System) -> CliResult<String> {
        self.pick(flag.cloned(), "run", "tag", system.name().to_string())
    }

    /// Options for `system`; `cb` falls back to the config, then to the
    /// full budget `ceil(c / b)`.
    pub fn options(&self, system: System, tune: &TuneArgs, cb: Option<usize>) -> CliResult<RunOptions> {
        let c = self.pick(tune.c, "budget", "c", 100)?;
        let b = self.pick(tune.b, "budget", "b", 16)?;
        if b == 0 {
            return Err(CliError::Core(ore_core::OreError::Validation("batch size b must be at least 1".into())));
        }
        let cb = self.pick(cb, "budget", "cb", BudgetLedger::full_cb(c, b))?;
        let mut opts = RunOptions::new(system, c, b, cb);
        opts.seed = self.pick(tune.seed, "run", "seed", 0)?;
        opts.per_call_ms = self.pick(tune.per_call_ms, "budget", "per_call_ms", opts.per_call_ms)?;

        let s = &mut opts.sched;
        s.s = self.pick(tune.s, "scheduler", "s", s.s)?;
        s.lambda = self.pick(tune.lambda, "scheduler", "lambda", s.lambda)?;
        s.u = self.pick_opt(None, "scheduler", "u")?.or(s.u);
        s.v = self.pick_opt(None, "scheduler", "v")?.or(s.v);
        s.random_alpha_first_batch = self.flag_bool(tune.random_alpha_first_batch, "scheduler", "random_alpha_first_batch")?;
        s.first_stage_depth = self.pick(None, "scheduler", "first_stage_depth", s.first_stage_depth)?;
        let rm3 = Rm3Params::default();
        s.rm3 = Rm3Params {
            fb_docs: self.pick(None, "rm3", "fb_docs", rm3.fb_docs)?,
            fb_terms: self.pick(None, "rm3", "fb_terms", rm3.fb_terms)?,
            orig_weight: self.pick(None, "rm3", "orig_weight", rm3.orig_weight)?,
        };

        opts.fusion.rrf_k = self.pick(None, "fusion", "rrf_k", opts.fusion.rrf_k)?;
        opts.fusion.cc_lambda = self.pick(None, "fusion", "cc_lambda", opts.fusion.cc_lambda)?;
        s.rrf_k = opts.fusion.rrf_k;
        opts.exhaustive_cap = self.pick(None, "exhaustive", "cap", opts.exhaustive_cap)?;
        opts.allow_large = self.flag_bool(tune.allow_large, "exhaustive", "allow_large")?;
        opts.ledger()?;
        Ok(opts)
    }
}
