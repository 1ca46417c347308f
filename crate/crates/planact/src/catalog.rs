//! Built-in action interface catalogs, one per task domain.
//!
//! Names, signatures, and descriptions here are what grounding prompts
//! advertise, so their exact wording is fixture-tested. Calculator and
//! Count are native; every other interface is a registry slot to be backed
//! by an external client or a fixture mock.

use crate::exec::{
    register_native_tools, ActionInterfaceSet, ExecError, MockTool, ToolKind, ToolRegistry, ToolSpec,
};
use std::collections::BTreeMap;
use std::sync::Arc;

/// Knowledge-intensive question answering: retrieval chain plus arithmetic.
pub fn qa_interfaces() -> ActionInterfaceSet {
    ActionInterfaceSet::new(vec![
        ToolSpec::new(
            "KnowledgeQuery",
            "KnowledgeQuery(Entity) -> Knowledge",
            "Query the entity knowledge",
            ToolKind::ExternalClient,
        ),
        ToolSpec::new(
            "ParagraphRetrieve",
            "ParagraphRetrieve(Knowledge, Query) -> Paragraphs",
            "Retrieve relevant paragraphs according to the query",
            ToolKind::ExternalClient,
        ),
        ToolSpec::new(
            "QA",
            "QA(Context, Query) -> Answer",
            "Answer the query based on the given context",
            ToolKind::ExternalClient,
        ),
        ToolSpec::new(
            "Calculator",
            "Calculator(Expression) -> Value",
            "Calculate given math expressions",
            ToolKind::Native,
        ),
    ])
    .expect("catalog names are unique")
}

/// Web browsing: element-level page operations.
pub fn web_interfaces() -> ActionInterfaceSet {
    ActionInterfaceSet::new(vec![
        ToolSpec::new(
            "CLICK",
            "CLICK(Env, Query) -> Tag",
            "Locate the tag to be clicked according to the query",
            ToolKind::ExternalClient,
        ),
        ToolSpec::new(
            "TYPE",
            "TYPE(Env, Query, Text) -> Tag, Text",
            "Locate the relevant tag according to the query and output the typed text",
            ToolKind::ExternalClient,
        ),
        ToolSpec::new(
            "SELECT",
            "SELECT(Env, Query, Text) -> Tag, Text",
            "Locate the relevant tag according to the query and output the selected option",
            ToolKind::ExternalClient,
        ),
    ])
    .expect("catalog names are unique")
}

/// Maths word problems: symbolic helpers around the native calculator.
pub fn math_interfaces() -> ActionInterfaceSet {
    ActionInterfaceSet::new(vec![
        ToolSpec::new(
            "Calculator",
            "Calculator(Expression) -> Value",
            "Calculate given math expressions",
            ToolKind::Native,
        ),
        ToolSpec::new(
            "SetEquation",
            "SetEquation(Expression) -> Equation",
            "Set equations based on given expressions",
            ToolKind::ExternalClient,
        ),
        ToolSpec::new(
            "SolveEquation",
            "SolveEquation(Equation) -> Solutions",
            "Solve the set equations",
            ToolKind::ExternalClient,
        ),
        ToolSpec::new(
            "Define",
            "Define(Variable) -> Variable",
            "Define a variable",
            ToolKind::ExternalClient,
        ),
        ToolSpec::new(
            "SolveInequality",
            "SolveInequality(Inequality) -> Solutions",
            "Solve the given inequality",
            ToolKind::ExternalClient,
        ),
        ToolSpec::new(
            "Code",
            "Code(Function_Description) -> Code",
            "Generate codes for math functions",
            ToolKind::ExternalClient,
        ),
        ToolSpec::new(
            "Count",
            "Count(List) -> Number",
            "Count the element number in a list",
            ToolKind::Native,
        ),
    ])
    .expect("catalog names are unique")
}

/// Multimodal question answering over a captioned image.
pub fn multimodal_interfaces() -> ActionInterfaceSet {
    ActionInterfaceSet::new(vec![
        ToolSpec::new(
            "QA",
            "QA(Context, Query) -> Answer",
            "Answer the query based on the given context",
            ToolKind::ExternalClient,
        ),
        ToolSpec::new(
            "VQA",
            "VQA(Image_Context, Query) -> Answer",
            "Answer the query based on the given image context",
            ToolKind::ExternalClient,
        ),
    ])
    .expect("catalog names are unique")
}

/// Interactive shopping environment.
pub fn webshop_interfaces() -> ActionInterfaceSet {
    ActionInterfaceSet::new(vec![
        ToolSpec::new(
            "Search",
            "Search(Query)",
            "Search related items according to the Query",
            ToolKind::ExternalClient,
        ),
        ToolSpec::new(
            "FeatureRetrieve",
            "FeatureRetrieve(Feature_list, Query)",
            "Select the most relevant features from Feature_list according to Query",
            ToolKind::ExternalClient,
        ),
        ToolSpec::new(
            "Pick",
            "Pick(Item_names, Item_features, Query)",
            "Pick the most relevant item from Item_names according to Query, Item_names and Item_features",
            ToolKind::ExternalClient,
        ),
        ToolSpec::new(
            "Click",
            "Click(Item)",
            "Click the Item to check more information",
            ToolKind::ExternalClient,
        ),
    ])
    .expect("catalog names are unique")
}

/// SQL environments ground into raw statements, so nothing is advertised.
pub fn sql_interfaces() -> ActionInterfaceSet {
    ActionInterfaceSet::empty()
}

/// Builds a registry for an interface set: native tools are wired to their
/// in-process implementations, every other tool is backed by the fixture
/// map supplied for it. Tools with neither stay unregistered and surface as
/// UnknownTool at execution time.
pub fn registry_with_mocks(
    interfaces: &ActionInterfaceSet,
    fixtures: &BTreeMap<String, BTreeMap<String, String>>,
) -> Result<ToolRegistry, ExecError> {
    let mut registry = ToolRegistry::new();
    for spec in interfaces.specs() {
        match spec.kind {
            ToolKind::Native if spec.name == "Calculator" || spec.name == "Count" => {}
            _ => {
                if let Some(map) = fixtures.get(&spec.name) {
                    registry.register_tool(&spec.name, Arc::new(MockTool::new(map.clone())))?;
                }
            }
        }
    }
    if interfaces.contains("Calculator") || interfaces.contains("Count") || interfaces.is_empty() {
        register_native_tools(&mut registry)?;
    }
    Ok(registry)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn webshop_action_list_matches_prompt_surface() {
        let rendered = webshop_interfaces().render_action_list().unwrap();
        assert_eq!(
            rendered,
            "The available action list is `Search', `FeatureRetrieve', `Pick' and `Click'. \
             Search(Query): Search related items according to the Query; \
             FeatureRetrieve(Feature_list, Query): Select the most relevant features from Feature_list according to Query; \
             Pick(Item_names, Item_features, Query): Pick the most relevant item from Item_names according to Query, Item_names and Item_features; \
             Click(Item): Click the Item to check more information."
        );
    }

    #[test]
    fn sql_domain_advertises_nothing() {
        assert_eq!(sql_interfaces().render_action_list(), None);
    }

    #[test]
    fn catalog_shapes() {
        assert_eq!(qa_interfaces().specs().len(), 4);
        assert_eq!(web_interfaces().specs().len(), 3);
        assert_eq!(math_interfaces().specs().len(), 7);
        assert_eq!(multimodal_interfaces().specs().len(), 2);
        assert_eq!(webshop_interfaces().specs().len(), 4);
    }

    #[test]
    fn mock_registry_registers_fixtures_and_natives() {
        let mut fixtures = BTreeMap::new();
        fixtures.insert(
            "QA".to_string(),
            BTreeMap::from([("ctx, Question: q".to_string(), "a".to_string())]),
        );
        let registry = registry_with_mocks(&qa_interfaces(), &fixtures).unwrap();
        let names: Vec<&str> = registry.names().collect();
        assert!(names.contains(&"QA"));
        assert!(names.contains(&"Calculator"));
        assert!(!names.contains(&"KnowledgeQuery"));
    }
}
