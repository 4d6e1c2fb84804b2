//! `judge-prompt`: the pairwise judging prompt used to compare two answers
//! for accuracy and detailedness. Rendering only; nothing is sent anywhere.

use std::io::Write;

use clap::Args;

use crate::{CliError, CliResult};

#[derive(Debug, Clone, Args)]
pub struct JudgeArgs {
    #[arg(long)]
    pub question: String,
    /// Answer from the unguided model.
    #[arg(long)]
    pub answer1: String,
    /// Answer from the guided model.
    #[arg(long)]
    pub answer2: String,
}

const PREAMBLE: &str = "\
You are required to score the performance of two AI assistants in describing a given image. You should pay extra attention to the hallucination, which refers to the part of descriptions that are inconsistent with the image content, such as claiming the existence of something not present in the image.

Please rate the responses of the assistants on a scale of 1 to 10, where a higher score indicates better performance, according to the following criteria:
1. Accuracy: whether the response is accurate with respect to the image content. Responses with fewer hallucinations should be given higher scores.
2. Detailedness: whether the response is rich in necessary details. Note that hallucinated descriptions should not count as necessary details.

Please output a single line for each criterion, containing only two values indicating the scores for Assistant 1 and 2, respectively. The two scores are separated by a space. Following the scores, please provide an explanation of your evaluation, avoiding any potential bias and ensuring that the order in which the responses were presented does not affect your judgment.

";

const OUTPUT_FORMAT: &str = "
Output format:
Accuracy:
Scores of the two answers:
Reason:
Detailedness:
Scores of the two answers:
Reason:
";

/// Fills the three slots. Each slot is filled once, so slot-like text inside
/// an answer is left alone.
pub fn render_judge_prompt(question: &str, answer1: &str, answer2: &str) -> CliResult<String> {
    for (name, value) in [("question", question), ("answer1", answer1), ("answer2", answer2)] {
        if value.trim().is_empty() {
            return Err(CliError::Input(format!("--{name} must not be empty")));
        }
    }
    Ok(format!("{PREAMBLE}Question: {question}\nAssistant 1: {answer1}\nAssistant 2: {answer2}\n{OUTPUT_FORMAT}"))
}

pub fn cmd_judge_prompt(args: &JudgeArgs, out: &mut dyn Write) -> CliResult<()> {
    let text = render_judge_prompt(&args.question, &args.answer1, &args.answer2)?;
    out.write_all(text.as_bytes()).map_err(|e| CliError::Input(format!("cannot write output: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slots_filled_once_each() {
        let text = render_judge_prompt("Q?", "first {answer 2}", "second").unwrap();
        assert_eq!(text.matches("Question: Q?").count(), 1);
        assert_eq!(text.matches("Assistant 1: first {answer 2}\n").count(), 1);
        assert_eq!(text.matches("Assistant 2: second\n").count(), 1);
        assert!(text.contains("\nAccuracy:\nScores of the two answers:\nReason:\nDetailedness:\n"));
    }

    #[test]
    fn empty_arguments_rejected() {
        assert!(render_judge_prompt("", "a", "b").is_err());
        assert!(render_judge_prompt("q", " ", "b").is_err());
        assert_eq!(render_judge_prompt("q", "a", "").unwrap_err().exit_code(), 2);
    }

    #[test]
    fn stable_output() {
        assert_eq!(render_judge_prompt("q", "a", "b").unwrap(), render_judge_prompt("q", "a", "b").unwrap());
    }
}
