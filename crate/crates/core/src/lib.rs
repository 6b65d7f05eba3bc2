//! Question answering over incomplete knowledge graphs.
//!
//! * [`kg`] loads tab-separated graphs and exposes views with hidden triples.
//! * [`query`] parses and evaluates the SPARQL subset used by gold queries.
//! * [`ikg`] builds incomplete graphs by dropping the triples a question needs.
//! * [`retrieval`] ranks triples and entity labels with BM25.
//! * [`llm`] renders prompts and talks to HTTP, queued or scripted backends.
//! * [`agent`] answers a question by searching the graph and generating triples.
//! * [`eval`] scores runs with Hits@1 and merges reports into tables.
//!
//! The guide in `book/` walks through each module with tested examples.

pub mod agent;
pub mod dataset;
pub mod eval;
pub mod ikg;
pub mod kg;
pub mod llm;
pub mod query;
pub mod retrieval;

#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/overview.md")]
    mod overview {}
    #[doc = include_str!("../../../book/src/graph.md")]
    mod graph {}
    #[doc = include_str!("../../../book/src/queries.md")]
    mod queries {}
    #[doc = include_str!("../../../book/src/incomplete.md")]
    mod incomplete {}
    #[doc = include_str!("../../../book/src/retrieval.md")]
    mod retrieval {}
    #[doc = include_str!("../../../book/src/llm.md")]
    mod llm {}
    #[doc = include_str!("../../../book/src/agent.md")]
    mod agent {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
