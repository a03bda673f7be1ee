//! Markdown reference of every subcommand flag and config key, generated
//! from the argument definitions so it cannot drift from them.

use clap::CommandFactory;
use mtc_core::config::{TrainConfig, KEYS};

use crate::Cli;

pub fn markdown() -> String {
    let mut cmd = Cli::command();
    cmd.build();
    let mut s = String::from("# mtc command reference\n\n");
    s.push_str("Generated by `mtc reference`.\n\n");
    s.push_str("Exit codes: 0 success, 2 usage or configuration error, 3 data or contract error, 4 numerical fault.\n\n");
    for sub in cmd.get_subcommands().filter(|c| c.get_name() != "help") {
        s.push_str(&format!("## mtc {}\n\n", sub.get_name()));
        if let Some(about) = sub.get_about() {
            s.push_str(&format!("{about}\n\n"));
        }
        let args: Vec<_> = sub.get_arguments().filter(|a| a.get_long().is_some() && a.get_id() != "help").collect();
        if args.is_empty() {
            continue;
        }
        s.push_str("| flag | description |\n|---|---|\n");
        for a in args {
            let long = a.get_long().expect("filtered");
            let takes_value = a.get_num_args().is_some_and(|n| n.takes_values());
            let flag = if takes_value { format!("`--{long} <{}>`", long.to_uppercase()) } else { format!("`--{long}`") };
            let mut desc = a.get_help().map(|h| h.to_string()).unwrap_or_default();
            let mut extra = Vec::new();
            if a.is_required_set() {
                extra.push("required".to_string());
            }
            let defaults: Vec<String> = a.get_default_values().iter().map(|v| v.to_string_lossy().into_owned()).collect();
            if !defaults.is_empty() && takes_value {
                extra.push(format!("default `{}`", defaults.join(" ")));
            }
            let values: Vec<String> = a.get_possible_values().iter().map(|v| v.get_name().to_string()).collect();
            if !values.is_empty() && takes_value {
                extra.push(format!("one of {}", values.join(", ")));
            }
            if !extra.is_empty() {
                if !desc.is_empty() {
                    desc.push_str("; ");
                }
                desc.push_str(&extra.join("; "));
            }
            s.push_str(&format!("| {flag} | {desc} |\n"));
        }
        s.push('\n');
    }
    s.push_str("## Config keys\n\n");
    s.push_str("Config files hold `key = value` lines (`#` starts a comment). `train --set KEY=VALUE` overrides a key; the dedicated train flags override both.\n\n");
    s.push_str("| key | default | description |\n|---|---|---|\n");
    let d = TrainConfig::default();
    for (k, help) in KEYS {
        s.push_str(&format!("| `{k}` | `{}` | {help} |\n", d.get(k).expect("known key")));
    }
    s
}
