use std::sync::Arc;
use std::thread;

use cellagent::coordination::{
    bind_shared, export_for_transfer, import_transferred, register_subagent, share_agent, transfer,
    AgentRegistry, CoordinationError,
};
use cellagent::descriptor::VariableDescriptor;
use cellagent::gateway::ScriptedModel;
use cellagent::orchestrator::{new_agent, Agent, AgentConfig, Final};
use cellagent::runtime::{create_runtime, eval_value, values_equal, RuntimeConfig, RuntimeError, RuntimeHandle};
use pyo3::prelude::*;

fn runtime() -> RuntimeHandle {
    create_runtime(RuntimeConfig::default()).unwrap()
}

fn agent(script: &[&str]) -> Agent {
    let model = Arc::new(ScriptedModel::new(script.iter().copied()));
    new_agent(AgentConfig::default(), runtime(), model, vec![], vec![]).unwrap()
}

fn text(rt: &RuntimeHandle, name: &str) -> String {
    let v = rt.get_variable(name).unwrap();
    Python::attach(|py| v.bind(py).str().unwrap().to_string())
}

#[test]
fn meta_cell_drives_sub_agent() {
    let sub = share_agent(agent(&["```m = sum([1, 2, 3]) / 3\nprint(m)```", "The mean is 2.0"]));
    let mut meta = agent(&["```reply = analyst.step('compute mean')\nprint(reply)```", "Analyst says 2.0"]);
    register_subagent(&mut meta, "analyst", sub.clone()).unwrap();
    assert!(meta.system_prompt().contains("- name: analyst"));
    let r = meta.run("ask the analyst").unwrap();
    assert_eq!(r.final_, Final::Answer("Analyst says 2.0".into()));
    assert_eq!(r.turns[0].observation.as_ref().unwrap().text, "The mean is 2.0");
    assert_eq!(text(sub.lock().unwrap().runtime(), "m"), "2.0");
}

#[test]
fn registering_twice_collides() {
    let mut meta = agent(&[]);
    register_subagent(&mut meta, "helper", share_agent(agent(&[]))).unwrap();
    let err = register_subagent(&mut meta, "helper", share_agent(agent(&[])));
    assert!(matches!(err, Err(CoordinationError::Collision(n)) if n == "helper"));

    let registry = AgentRegistry::new();
    registry.register("a", share_agent(agent(&[]))).unwrap();
    assert!(matches!(
        registry.register("a", share_agent(agent(&[]))),
        Err(CoordinationError::Collision(_))
    ));
    assert_eq!(registry.names(), vec!["a"]);
}

#[test]
fn meta_sets_variable_sub_reads_it() {
    let sub = share_agent(agent(&["```print(target * 2)```", "done"]));
    let mut meta = agent(&["```worker.set_variable('target', 21)\nprint(worker.step('double it'))```", "ok"]);
    register_subagent(&mut meta, "worker", sub.clone()).unwrap();
    meta.run("delegate").unwrap();
    let sub = sub.lock().unwrap();
    assert_eq!(text(sub.runtime(), "target"), "21");
    let turn = &sub.history().messages()[3];
    assert!(turn.content.contains("42"));
}

#[test]
fn transfer_keeps_live_objects() {
    let a = runtime();
    let b = runtime();
    a.execute_cell(
        "class Model:\n    def fit(self, xs):\n        self.mean = sum(xs) / len(xs)\n        return self\n    def predict(self):\n        return self.mean\nmodel = Model().fit([1, 2, 3, 6])",
    )
    .unwrap();
    transfer(&a, "model", &b, None, false).unwrap();
    let out = b.execute_cell("model.predict()").unwrap();
    assert_eq!(out.last_value_repr.as_deref(), Some("3.0"));
    assert!(values_equal(&a.get_variable("model").unwrap(), &b.get_variable("model").unwrap()));
}

#[test]
fn transfer_missing_name() {
    let err = transfer(&runtime(), "ghost", &runtime(), None, false);
    assert!(matches!(err, Err(CoordinationError::Runtime(RuntimeError::NotFound(_)))));
}

#[test]
fn transfer_immutable_then_mutate_in_dst() {
    let a = runtime();
    let b = runtime();
    a.execute_cell("n = 7").unwrap();
    transfer(&a, "n", &b, Some("m"), false).unwrap();
    b.execute_cell("m += 1").unwrap();
    assert_eq!(text(&a, "n"), "7");
    assert_eq!(text(&b, "m"), "8");
}

#[test]
fn transfer_mutable_shares_identity() {
    let a = runtime();
    let b = runtime();
    a.execute_cell("xs = [1, 2]").unwrap();
    transfer(&a, "xs", &b, None, false).unwrap();
    b.execute_cell("xs.append(3)").unwrap();
    assert_eq!(text(&a, "xs"), "[1, 2, 3]");
}

#[test]
fn transfer_collision_needs_overwrite() {
    let a = runtime();
    let b = runtime();
    a.execute_cell("v = 1").unwrap();
    b.execute_cell("v = 2").unwrap();
    assert!(matches!(transfer(&a, "v", &b, None, false), Err(CoordinationError::Collision(_))));
    transfer(&a, "v", &b, None, true).unwrap();
    assert_eq!(text(&b, "v"), "1");
}

#[test]
fn serialized_transfer_copies() {
    let a = runtime();
    let b = runtime();
    a.execute_cell("d = {'k': [1, 2]}").unwrap();
    let entry = export_for_transfer(&a, "d").unwrap();
    let json = serde_json::to_string(&entry).unwrap();
    let entry = serde_json::from_str(&json).unwrap();
    import_transferred(&entry, &b, None, false).unwrap();
    b.execute_cell("d['k'].append(3)").unwrap();
    assert_eq!(text(&a, "d"), "{'k': [1, 2]}");
    assert_eq!(text(&b, "d"), "{'k': [1, 2, 3]}");
}

#[test]
fn shared_weather_is_seen_by_all() {
    let a1 = share_agent(agent(&["```weather = 'rain'```", "set"]));
    let a2 = share_agent(agent(&["```print(weather)```", "it rains"]));
    let shared = runtime();
    let binding = bind_shared(vec![("a1".into(), a1.clone()), ("a2".into(), a2.clone())], shared.clone()).unwrap();
    a1.lock().unwrap().run("make it rain").unwrap();
    let r = a2.lock().unwrap().run("what is the weather").unwrap();
    assert_eq!(r.turns[0].observation.as_ref().unwrap().text, "rain");
    assert_eq!(text(binding.runtime(), "weather"), "rain");

    let location = eval_value("{'name': 'library', 'open': True}").unwrap();
    binding
        .inject(VariableDescriptor::new("library", "dict", "A new location"), location)
        .unwrap();
    let out = binding.execute("library['name']").unwrap();
    assert_eq!(out.last_value_repr.as_deref(), Some("'library'"));
}

#[test]
fn binding_twice_is_rejected() {
    let a = share_agent(agent(&[]));
    bind_shared(vec![("a".into(), a.clone())], runtime()).unwrap();
    let err = bind_shared(vec![("a".into(), a)], runtime());
    assert!(matches!(err, Err(CoordinationError::AlreadyBound(_))));
}

#[test]
fn simultaneous_members_are_serialized() {
    let shared = runtime();
    shared.execute_cell("trace = []\ntotal = 0").unwrap();
    let members: Vec<(String, _)> = (0..4)
        .map(|i| {
            let cell = format!(
                "```for _ in range(50):\n    trace.append({i})\ntotal = total * 2 + {i}```"
            );
            (format!("m{i}"), share_agent(agent(&[cell.as_str(), "done"])))
        })
        .collect();
    let binding = bind_shared(members.clone(), shared.clone()).unwrap();
    let handles: Vec<_> = members
        .into_iter()
        .map(|(_, a)| thread::spawn(move || a.lock().unwrap().run("go").unwrap()))
        .collect();
    for h in handles {
        assert_eq!(h.join().unwrap().final_, Final::Answer("done".into()));
    }
    let trace: Vec<i64> = Python::attach(|py| {
        binding.get_variable("trace").unwrap().bind(py).extract().unwrap()
    });
    assert_eq!(trace.len(), 200);
    let order: Vec<i64> = trace.chunks(50).map(|c| c[0]).collect();
    for (chunk, who) in trace.chunks(50).zip(&order) {
        assert!(chunk.iter().all(|x| x == who), "cells interleaved");
    }
    let expected = order.iter().fold(0, |acc, i| acc * 2 + i);
    assert_eq!(text(&shared, "total"), expected.to_string());
}

fn py_literal() -> impl proptest::strategy::Strategy<Value = String> {
    use proptest::prelude::*;
    let leaf = prop_oneof![
        any::<i32>().prop_map(|n| n.to_string()),
        (-1000.0f64..1000.0).prop_map(|f| format!("{f:?}")),
        "[a-z ]{0,8}".prop_map(|s| format!("'{s}'")),
        Just("None".to_string()),
        any::<bool>().prop_map(|b| if b { "True".into() } else { "False".into() }),
    ];
    leaf.prop_recursive(3, 24, 4, |inner| {
        prop_oneof![
            prop::collection::vec(inner.clone(), 0..4).prop_map(|v| format!("[{}]", v.join(", "))),
            prop::collection::vec(inner.clone(), 0..4).prop_map(|v| format!("({}{})", v.join(", "), if v.len() == 1 { "," } else { "" })),
            prop::collection::vec(("[a-z]{1,4}", inner), 0..4).prop_map(|v| {
                format!("{{{}}}", v.iter().map(|(k, x)| format!("'{k}': {x}")).collect::<Vec<_>>().join(", "))
            }),
        ]
    })
}

proptest::proptest! {
    #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]

    #[test]
    fn transfers_preserve_values(lit in py_literal()) {
        let (a, b, c) = (runtime(), runtime(), runtime());
        a.execute_cell(&format!("v = {lit}")).unwrap();
        let src = a.get_variable("v").unwrap();
        transfer(&a, "v", &b, Some("w"), false).unwrap();
        proptest::prop_assert!(values_equal(&src, &b.get_variable("w").unwrap()));
        let entry = export_for_transfer(&a, "v").unwrap();
        import_transferred(&entry, &c, None, false).unwrap();
        proptest::prop_assert!(values_equal(&src, &c.get_variable("v").unwrap()), "{}", lit);
    }
}
