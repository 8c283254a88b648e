//! Default prompt and feedback templates.
//!
//! Placeholders use `{name}` syntax and are filled by [`fill`].

use serde::{Deserialize, Serialize};

use super::SemanticError;

pub const AGENT_IDENTITY: &str = "You are a tool-augmented agent specializing in Python programming that enables function-calling through LLM code generation. You have to leverage your coding capabilities to interact with tools through a Python runtime environment, allowing direct access to execution results and runtime state. The user will give you a task and you should solve it by writing Python code in the Python environment provided.";

pub const CORE_INSTRUCTIONS: &str = "1. Carefully read and analyze the user's input.

2. If the task requires Python code:
   - Generate appropriate Python code to address the user's request.
   - Your code will then be executed in a Python environment, and the execution result will be returned to you as input for the next step.
   - During each intermediate step, you can use 'print()' to save whatever important information you will then need in the following steps.
   - These print outputs will then be given to you as input for the next step.
   - Review the result and generate additional code as needed until the task is completed.

3. CRITICAL EXECUTION CONTEXT: You are operating in a persistent Jupyter-like environment where:
  - Each code block you write is executed in a new cell within the SAME continuous session
  - ALL variables, functions, and imports persist across cells automatically
  - You can directly reference any variable created in previous cells without using locals(), globals(), or any special access methods.

4. If the task doesn't require Python code, provide a direct answer based on your knowledge.

5. Always provide your final answer in plain text, not as a code block.

6. You must not perform any calculations or operations yourself, even for simple tasks like sorting or addition.

7. Write your code in a {python_block_identifier} code block. In each step, write all your code in only one block.

8. Never predict, simulate, or fabricate code execution results.

9. To solve the task, you must plan forward to proceed in a series of steps, in a cycle of Thought and Code sequences.";

pub const SYSTEM_PROMPT: &str = "{agent_identity}

Current time: {current_time}

You have access to:

{functions}

{variables}

{types}

Instructions:
{instructions}

{additional_context}";

pub const EXECUTION_FEEDBACK: &str = "<execution_output>
{execution_output}
</execution_output>

IMPORTANT CONTEXT REMINDER:
- Based on this output, should we continue with more operations?
- If the output includes an error, please review the error carefully and modify your code to fix the error if needed.
- If yes, provide the next code block. If no, provide the final answer (not as a code block).
- You are in the SAME Jupyter-like session. All variables from your previous code blocks are still available and can be accessed directly by name.
- You DO NOT need to use locals(), globals(), or any special methods to access them.
- Think of this exactly like working in Jupyter: when you create a variable in cell 1, you can simply use it by name in cell 2, 3, 4, etc.";

pub const TRUNCATION_FEEDBACK: &str = "The code execution generated {output_length} characters of output, which exceeds the maximum limit of {max_length} characters.
Please modify your code to:
1. Avoid printing large datasets or lengthy content
2. Use summary statistics instead of full data (e.g., print shape, head(), describe() for dataframes)
3. Print only essential information needed for the task";

pub const SECURITY_FEEDBACK: &str = "<security_error>
{error}
</security_error>
Code blocked for security reasons. Please modify your code to avoid this violation.";

pub const DEFAULT_BLOCK_IDENTIFIER: &str = "python";

/// Substitute `{key}` placeholders. Unknown placeholders are left verbatim,
/// so literal braces in injected text survive.
pub fn fill(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(start) = rest.find('{') {
        out.push_str(&rest[..start]);
        let after = &rest[start + 1..];
        let hit = after.find('}').and_then(|end| {
            let key = &after[..end];
            values
                .iter()
                .find(|(k, _)| *k == key)
                .map(|(_, v)| (end, *v))
        });
        match hit {
            Some((end, v)) => {
                out.push_str(v);
                rest = &after[end + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptTemplateSet {
    pub system_prompt: String,
    pub agent_identity: String,
    pub instructions: String,
    pub block_identifier: String,
    pub execution_feedback: String,
    pub truncation_feedback: String,
    pub security_feedback: String,
}

impl Default for PromptTemplateSet {
    fn default() -> Self {
        Self {
            system_prompt: SYSTEM_PROMPT.into(),
            agent_identity: AGENT_IDENTITY.into(),
            instructions: CORE_INSTRUCTIONS.into(),
            block_identifier: DEFAULT_BLOCK_IDENTIFIER.into(),
            execution_feedback: EXECUTION_FEEDBACK.into(),
            truncation_feedback: TRUNCATION_FEEDBACK.into(),
            security_feedback: SECURITY_FEEDBACK.into(),
        }
    }
}

const REQUIRED: &[(&str, &[&str])] = &[
    (
        "system_prompt",
        &[
            "{agent_identity}",
            "{current_time}",
            "{functions}",
            "{variables}",
            "{types}",
            "{instructions}",
            "{additional_context}",
        ],
    ),
    ("execution_feedback", &["{execution_output}"]),
    ("truncation_feedback", &["{output_length}", "{max_length}"]),
    ("security_feedback", &["{error}"]),
];

impl PromptTemplateSet {
    fn field(&self, name: &str) -> &str {
        match name {
            "system_prompt" => &self.system_prompt,
            "execution_feedback" => &self.execution_feedback,
            "truncation_feedback" => &self.truncation_feedback,
            "security_feedback" => &self.security_feedback,
            _ => "",
        }
    }

    /// Every template carries the placeholders it is filled with.
    pub fn validate(&self) -> Result<(), SemanticError> {
        for (name, keys) in REQUIRED {
            for key in *keys {
                if !self.field(name).contains(key) {
                    return Err(SemanticError::Template {
                        template: (*name).into(),
                        placeholder: (*key).into(),
                    });
                }
            }
        }
        if self.block_identifier.trim().is_empty() {
            return Err(SemanticError::Template {
                template: "block_identifier".into(),
                placeholder: "<non-empty>".into(),
            });
        }
        Ok(())
    }

    /// Overlay a TOML or JSON document keyed by template name onto the
    /// defaults.
    pub fn from_override_str(text: &str, json: bool) -> Result<Self, SemanticError> {
        let set: Self = if json {
            serde_json::from_str(text).map_err(|e| SemanticError::Config(e.to_string()))?
        } else {
            toml::from_str(text).map_err(|e| SemanticError::Config(e.to_string()))?
        };
        set.validate()?;
        Ok(set)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self, SemanticError> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).map_err(|e| SemanticError::Config(e.to_string()))?;
        Self::from_override_str(&text, path.extension().is_some_and(|e| e == "json"))
    }

    /// The instructions with the fence tag substituted.
    pub fn rendered_instructions(&self) -> String {
        fill(
            &self.instructions,
            &[("python_block_identifier", &self.block_identifier)],
        )
    }
}
