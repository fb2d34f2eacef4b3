//! Talk to an external language-model oracle over JSON lines. The oracle
//! here is a shell loop answering a uniform distribution over 4 tokens.
//! Pass a command to use a real one: `-- python my_oracle.py`.

use std::process::Command;
use std::time::Duration;

use anyhow::Result;
use promptbound::{point_mass_kl, KlPolicy, OracleBridgePrior, PriorModel, PromptSet, TokenId};

const STUB: &str = r#"while IFS= read -r line; do
  id=$(printf '%s' "$line" | sed 's/.*"id":\([0-9]*\).*/\1/')
  printf '{"id":%s,"tokens":[0,1,2,3],"logprobs":[-1.3862943611198906,-1.3862943611198906,-1.3862943611198906,-1.3862943611198906],"logprob":-2.772588722239781}\n' "$id"
done"#;

fn main() -> Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let cmd = match args.split_first() {
        Some((prog, rest)) => {
            let mut c = Command::new(prog);
            c.args(rest);
            c
        }
        None => {
            let mut c = Command::new("sh");
            c.arg("-c").arg(STUB);
            c
        }
    };
    let bridge = OracleBridgePrior::spawn(cmd, 4, Duration::from_secs(10))?;
    let lp = bridge.next_token_logprobs(&[TokenId(1)])?;
    println!("next-token log-probs after [1]: {lp:?}");
    let prompts = PromptSet::new(
        vec![vec![TokenId(0), TokenId(1)], vec![TokenId(2), TokenId(3)]],
        vec![],
    );
    println!(
        "point-mass KL: {:.4}",
        point_mass_kl(&bridge, &prompts, KlPolicy::default())?
    );
    Ok(())
}
